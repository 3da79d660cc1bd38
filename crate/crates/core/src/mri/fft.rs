//! Centered orthonormal 2-D Fourier transforms (radix-2).

use std::f64::consts::PI;

use super::{ComplexImage, KSpace, MriError, Plane};

fn is_pow2(n: usize) -> bool {
    n >= 2 && n.is_power_of_two()
}

pub(crate) fn check_size(height: usize, width: usize) -> Result<(), MriError> {
    if !is_pow2(height) || !is_pow2(width) {
        return Err(MriError::UnsupportedSize { height, width });
    }
    Ok(())
}

/// In-place iterative radix-2 FFT of one complex line. `inverse` flips the
/// exponent sign; no scaling is applied.
fn fft_line(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let theta = sign * 2.0 * PI / len as f64;
        for k in 0..half {
            let (wi, wr) = (theta * k as f64).sin_cos();
            let mut start = 0;
            while start < n {
                let a = start + k;
                let b = a + half;
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                start += len;
            }
        }
        len <<= 1;
    }
}

/// Circular shift by half the size in both axes. For even sizes this is its
/// own inverse, so it serves as both `fftshift` and `ifftshift`.
fn half_shift(plane: &mut [f64], height: usize, width: usize) {
    let mut out = vec![0.0; plane.len()];
    let (hh, hw) = (height / 2, width / 2);
    for y in 0..height {
        let sy = (y + hh) % height;
        for x in 0..width {
            out[sy * width + (x + hw) % width] = plane[y * width + x];
        }
    }
    plane.copy_from_slice(&out);
}

fn transform(height: usize, width: usize, re: &mut [f64], im: &mut [f64], inverse: bool) {
    half_shift(re, height, width);
    half_shift(im, height, width);
    for y in 0..height {
        let r = y * width..(y + 1) * width;
        fft_line(&mut re[r.clone()], &mut im[r], inverse);
    }
    let mut col_re = vec![0.0; height];
    let mut col_im = vec![0.0; height];
    for x in 0..width {
        for y in 0..height {
            col_re[y] = re[y * width + x];
            col_im[y] = im[y * width + x];
        }
        fft_line(&mut col_re, &mut col_im, inverse);
        for y in 0..height {
            re[y * width + x] = col_re[y];
            im[y * width + x] = col_im[y];
        }
    }
    half_shift(re, height, width);
    half_shift(im, height, width);
    let scale = 1.0 / ((height * width) as f64).sqrt();
    re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= scale);
}

fn transformed<A, B>(x: &Plane<A>, inverse: bool) -> Result<Plane<B>, MriError> {
    check_size(x.height, x.width)?;
    let mut re = x.re.clone();
    let mut im = x.im.clone();
    transform(x.height, x.width, &mut re, &mut im, inverse);
    Ok(Plane::from_parts(x.height, x.width, re, im))
}

/// Centered orthonormal forward transform, image → k-space.
pub fn fft2c(x: &ComplexImage) -> Result<KSpace, MriError> {
    transformed(x, false)
}

/// Centered orthonormal inverse transform, k-space → image.
pub fn ifft2c(y: &KSpace) -> Result<ComplexImage, MriError> {
    transformed(y, true)
}
