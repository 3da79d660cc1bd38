//! Straight-line reference implementations used to cross-check the fast
//! paths. Nothing here shares code with the routines it checks: the
//! convolution is a direct nested loop, the Fourier transform is a naive
//! DFT, and SSIM is evaluated window by window.

use std::f64::consts::PI;

/// Direct same-size dilated cross-correlation, `C_in×H×W` ⊛ `C_out×C_in×k×k`.
pub fn conv2d_nested_loop(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    kernel: &[f64],
    (c_out, k): (usize, usize),
    dilation: usize,
) -> Vec<f64> {
    let pad = (dilation * (k - 1) / 2) as isize;
    let mut out = vec![0.0; c_out * h * w];
    for co in 0..c_out {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + (ky * dilation) as isize - pad;
                            let sx = x as isize + (kx * dilation) as isize - pad;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let iv = input[(ci * h + sy as usize) * w + sx as usize];
                            let kv = kernel[((co * c_in + ci) * k + ky) * k + kx];
                            acc += iv * kv;
                        }
                    }
                }
                out[(co * h + y) * w + x] = acc;
            }
        }
    }
    out
}

/// Naive centered orthonormal 2-D DFT on `(re, im)` planes. `inverse`
/// selects the positive exponent.
pub fn dft2c_naive(re: &[f64], im: &[f64], h: usize, w: usize, inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let sign = if inverse { 1.0 } else { -1.0 };
    // centered indices run over −N/2 .. N/2−1
    let cy = |i: usize| i as f64 - (h / 2) as f64;
    let cx = |i: usize| i as f64 - (w / 2) as f64;
    // separable: rows first, then columns
    let mut tr = vec![0.0; h * w];
    let mut ti = vec![0.0; h * w];
    for y in 0..h {
        for u in 0..w {
            let (mut ar, mut ai) = (0.0, 0.0);
            for x in 0..w {
                let ang = sign * 2.0 * PI * cx(u) * cx(x) / w as f64;
                let (s, c) = ang.sin_cos();
                let (vr, vi) = (re[y * w + x], im[y * w + x]);
                ar += vr * c - vi * s;
                ai += vr * s + vi * c;
            }
            tr[y * w + u] = ar;
            ti[y * w + u] = ai;
        }
    }
    let mut or = vec![0.0; h * w];
    let mut oi = vec![0.0; h * w];
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in 0..h {
        for u in 0..w {
            let (mut ar, mut ai) = (0.0, 0.0);
            for y in 0..h {
                let ang = sign * 2.0 * PI * cy(v) * cy(y) / h as f64;
                let (s, c) = ang.sin_cos();
                let (vr, vi) = (tr[y * w + u], ti[y * w + u]);
                ar += vr * c - vi * s;
                ai += vr * s + vi * c;
            }
            or[v * w + u] = ar * scale;
            oi[v * w + u] = ai * scale;
        }
    }
    (or, oi)
}

/// Closed-form solution of `(AᴴA + λI) m = rhs` for a Cartesian mask:
/// `m = Fᴴ[(mask + λ)⁻¹ · F rhs]`, since `AᴴA = Fᴴ diag(mask) F`.
pub fn tikhonov_diagonal(
    rhs_re: &[f64],
    rhs_im: &[f64],
    mask: &[u8],
    h: usize,
    w: usize,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let (mut kr, mut ki) = dft2c_naive(rhs_re, rhs_im, h, w, false);
    for i in 0..h * w {
        let d = mask[i] as f64 + lambda;
        kr[i] /= d;
        ki[i] /= d;
    }
    dft2c_naive(&kr, &ki, h, w, true)
}

/// SSIM averaged over every fully contained `size×size` Gaussian window,
/// each window evaluated directly from its weighted moments.
pub fn ssim_per_window(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    size: usize,
    sigma: f64,
    data_range: f64,
    k1: f64,
    k2: f64,
) -> f64 {
    let c1 = (k1 * data_range).powi(2);
    let c2 = (k2 * data_range).powi(2);
    let r = (size / 2) as f64;
    let mut weights = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - r;
            let dx = j as f64 - r;
            weights[i * size + j] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);

    let mut acc = 0.0;
    let mut windows = 0usize;
    for oy in 0..=(h - size) {
        for ox in 0..=(w - size) {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let wt = weights[i * size + j];
                    mx += wt * x[(oy + i) * w + ox + j];
                    my += wt * y[(oy + i) * w + ox + j];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let wt = weights[i * size + j];
                    let dx = x[(oy + i) * w + ox + j] - mx;
                    let dy = y[(oy + i) * w + ox + j] - my;
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cxy += wt * dx * dy;
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1;
        }
    }
    acc / windows as f64
}

/// Channel gate of the attention block computed with plain loops from a
/// `C×H×W` feature map. `weight(name)` returns the raw tensor values.
///
/// The pyramid convolutions act on `C×1×1` descriptors, where only the
/// centre tap of a dilated 3×3 kernel lands inside the zero-padded grid.
pub fn laplacian_attention_direct<'a>(
    f: &[f64],
    (c, h, w): (usize, usize, usize),
    weight: impl Fn(&str) -> &'a [f64],
) -> Vec<f64> {
    let hw = h * w;
    let g_avg: Vec<f64> = (0..c).map(|i| f[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    let g_max: Vec<f64> = (0..c)
        .map(|i| f[i * hw..(i + 1) * hw].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let centre = |k: &[f64], fan_in: usize, o: usize, i: usize| k[(o * fan_in + i) * 9 + 4];

    let mut logits = vec![0.0; c];
    for (branch, g) in [("avg", &g_avg), ("max", &g_max)] {
        let mut pyramid = Vec::with_capacity(3 * c);
        for d in [3, 5, 7] {
            let k = weight(&format!("rslam.slam.lap.{branch}.d{d}.weight"));
            for o in 0..c {
                let s: f64 = (0..c).map(|i| centre(k, c, o, i) * g[i]).sum();
                pyramid.push(s.max(0.0));
            }
        }
        let k = weight(&format!("rslam.slam.lap.fuse_{branch}.weight"));
        let b = weight(&format!("rslam.slam.lap.fuse_{branch}.bias"));
        for o in 0..c {
            logits[o] += b[o] + (0..3 * c).map(|j| centre(k, 3 * c, o, j) * pyramid[j]).sum::<f64>();
        }
    }
    logits.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
}
