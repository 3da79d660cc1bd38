use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{KSpace, MriError, SamplingMask};

/// Add circular complex Gaussian noise with total variance `variance` at the
/// sampled positions of `mask`. Real and imaginary parts each receive
/// variance `variance / 2`; unsampled entries stay exactly zero.
pub fn add_noise(b: &KSpace, mask: &SamplingMask, variance: f64, seed: u64) -> Result<KSpace, MriError> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(MriError::MaskConfig(format!("noise variance must be finite and >= 0, got {variance}")));
    }
    if (b.height, b.width) != (mask.height(), mask.width()) {
        return Err(MriError::ShapeMismatch {
            left: (b.height, b.width),
            right: (mask.height(), mask.width()),
        });
    }
    let mut out = b.clone();
    if variance == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, (variance / 2.0).sqrt()).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (k, &m) in mask.grid().iter().enumerate() {
        if m == 1 {
            out.re[k] += normal.sample(&mut rng);
            out.im[k] += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_is_identity() {
        let mut b = KSpace::zeros(8, 8);
        b.re[3] = 1.5;
        let mask = SamplingMask::uniform(8, 8, true);
        assert_eq!(add_noise(&b, &mask, 0.0, 1).unwrap(), b);
    }

    #[test]
    fn empirical_variance_matches() {
        let b = KSpace::zeros(256, 256);
        let mask = SamplingMask::uniform(256, 256, true);
        let noisy = add_noise(&b, &mask, 0.03, 42).unwrap();
        let n = noisy.len() as f64;
        let mean_re = noisy.re.iter().sum::<f64>() / n;
        let mean_im = noisy.im.iter().sum::<f64>() / n;
        let var: f64 = noisy
            .re
            .iter()
            .zip(&noisy.im)
            .map(|(r, i)| (r - mean_re).powi(2) + (i - mean_im).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        assert!((var - 0.03).abs() < 0.003, "variance {var}");
    }

    #[test]
    fn reproducible_and_masked() {
        let b = KSpace::zeros(16, 16);
        let mut grid = vec![0u8; 256];
        grid[..128].iter_mut().for_each(|v| *v = 1);
        let mask = SamplingMask::from_grid(*SamplingMask::uniform(1, 1, true).spec(), 16, 16, grid).unwrap();
        let a = add_noise(&b, &mask, 0.1, 7).unwrap();
        assert_eq!(a, add_noise(&b, &mask, 0.1, 7).unwrap());
        assert_ne!(a, add_noise(&b, &mask, 0.1, 8).unwrap());
        assert!(a.re[128..].iter().chain(&a.im[128..]).all(|&v| v == 0.0));
    }

    #[test]
    fn negative_variance_rejected() {
        let b = KSpace::zeros(4, 4);
        let mask = SamplingMask::uniform(4, 4, true);
        assert!(add_noise(&b, &mask, -1.0, 0).is_err());
    }
}
