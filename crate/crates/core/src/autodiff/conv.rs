//! Same-size dilated 2-D cross-correlation via im2col + GEMM.
//!
//! Layout: input `C_in×H×W`, kernel `C_out×C_in×k×k`, zero padding of
//! `dilation·(k−1)/2` on every side so the output is `C_out×H×W`.

use super::{ShapeError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, kernel: &Tensor, dilation: usize) -> Result<Self, ShapeError> {
        let (c_in, height, width) = input.chw()?;
        let (c_out, kc_in, kh, kw) = match kernel.shape() {
            &[a, b, c, d] => (a, b, c, d),
            other => {
                return Err(ShapeError::Rank {
                    expected: 4,
                    shape: other.to_vec(),
                })
            }
        };
        if kc_in != c_in {
            return Err(ShapeError::Channels {
                input: c_in,
                kernel: kc_in,
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(ShapeError::Kernel {
                shape: kernel.shape().to_vec(),
            });
        }
        if dilation == 0 {
            return Err(ShapeError::Dilation);
        }
        Ok(ConvGeometry {
            c_in,
            c_out,
            height,
            width,
            k: kh,
            dilation,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// For kernel tap `t` (0..k), the valid output range and the input offset.
    fn tap_range(&self, t: usize, len: usize) -> (usize, usize, isize) {
        let off = (t as isize - (self.k / 2) as isize) * self.dilation as isize;
        let lo = (-off).max(0) as usize;
        let hi = (len as isize - off).min(len as isize).max(0) as usize;
        (lo.min(hi), hi, off)
    }
}

fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (h, w, k) = (g.height, g.width, g.k);
    let hw = g.pixels();
    let mut cols = vec![0.0; g.rows() * hw];
    for ci in 0..g.c_in {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let (y0, y1, oy) = g.tap_range(ky, h);
            for kx in 0..k {
                let (x0, x1, ox) = g.tap_range(kx, w);
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in y0..y1 {
                    let sy = (y as isize + oy) as usize;
                    let src = &plane[sy * w..(sy + 1) * w];
                    let d = &mut dst[y * w..(y + 1) * w];
                    for xx in x0..x1 {
                        d[xx] = src[(xx as isize + ox) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (h, w, k) = (g.height, g.width, g.k);
    let hw = g.pixels();
    let mut x = vec![0.0; g.c_in * hw];
    for ci in 0..g.c_in {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let (y0, y1, oy) = g.tap_range(ky, h);
            for kx in 0..k {
                let (x0, x1, ox) = g.tap_range(kx, w);
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in y0..y1 {
                    let sy = (y as isize + oy) as usize;
                    for xx in x0..x1 {
                        plane[sy * w + (xx as isize + ox) as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

/// `c (m×n) = a (m×k) · b (k×n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover the strided extents required by the
    // dimensions; checked by the callers' shape logic and the asserts below.
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward(input: &Tensor, kernel: &Tensor, g: &ConvGeometry) -> Tensor {
    let cols = im2col(input.data(), g);
    let (m, k, n) = (g.c_out, g.rows(), g.pixels());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, kernel.data(), (k, 1), &cols, (n, 1), &mut out);
    Tensor::new(&[g.c_out, g.height, g.width], out).expect("conv output shape")
}

pub(crate) fn backward_input(grad_out: &Tensor, kernel: &Tensor, g: &ConvGeometry) -> Tensor {
    let (m, k, n) = (g.c_out, g.rows(), g.pixels());
    let mut dcols = vec![0.0; k * n];
    // kernelᵀ (k×m) · grad_out (m×n)
    gemm(k, m, n, kernel.data(), (1, k), grad_out.data(), (n, 1), &mut dcols);
    let dx = col2im(&dcols, g);
    Tensor::new(&[g.c_in, g.height, g.width], dx).expect("conv input grad shape")
}

pub(crate) fn backward_kernel(grad_out: &Tensor, input: &Tensor, g: &ConvGeometry) -> Tensor {
    let cols = im2col(input.data(), g);
    let (m, k, n) = (g.c_out, g.rows(), g.pixels());
    let mut dk = vec![0.0; m * k];
    // grad_out (m×n) · colsᵀ (n×k)
    gemm(m, n, k, grad_out.data(), (n, 1), &cols, (1, n), &mut dk);
    Tensor::new(&[g.c_out, g.c_in, g.k, g.k], dk).expect("conv kernel grad shape")
}

/// Same-size dilated cross-correlation without gradient tracking.
pub fn conv2d(input: &Tensor, kernel: &Tensor, dilation: usize) -> Result<Tensor, ShapeError> {
    let g = ConvGeometry::new(input, kernel, dilation)?;
    Ok(forward(input, kernel, &g))
}
