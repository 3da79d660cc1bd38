//! Synthetic ellipse and textured phantoms with smooth phase.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{add_noise, fft::check_size, forward_op, ComplexImage, KSpace, MriError, SamplingMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    EllipsePhantom,
    TexturedPhantom,
}

/// Per-client appearance parameters; distinct values shift the
/// intensity histogram between clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastParams {
    /// Exponent applied to normalized tissue intensity.
    pub gamma: f64,
    /// Intensity floor added inside the head outline.
    pub background: f64,
    /// Relative amplitude of the sinusoidal texture (textured phantoms only).
    pub texture: f64,
}

impl Default for ContrastParams {
    fn default() -> Self {
        ContrastParams {
            gamma: 1.0,
            background: 0.1,
            texture: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub size: usize,
    pub contrast: ContrastParams,
    pub seed: u64,
}

/// One generated pair plus the mask it was measured with.
#[derive(Debug, Clone)]
pub struct PhantomSample {
    pub truth: ComplexImage,
    pub kspace: KSpace,
    pub mask: Arc<SamplingMask>,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn magnitude_image<R: Rng>(spec: &PhantomSpec, rng: &mut R) -> Vec<f64> {
    let n = spec.size;
    let head_a = rng.random_range(0.72..0.88);
    let head_b = rng.random_range(0.82..0.95);
    let head_angle = rng.random_range(-0.2..0.2);
    let mut ellipses = vec![
        Ellipse { cx: 0.0, cy: 0.0, a: head_a, b: head_b, angle: head_angle, value: 1.0 },
        Ellipse { cx: 0.0, cy: 0.0, a: head_a * 0.92, b: head_b * 0.92, angle: head_angle, value: -0.6 },
    ];
    let count = rng.random_range(4..9);
    for _ in 0..count {
        let r = rng.random_range(0.0..0.5);
        let t = rng.random_range(0.0..2.0 * PI);
        ellipses.push(Ellipse {
            cx: r * t.cos() * head_a,
            cy: r * t.sin() * head_b,
            a: rng.random_range(0.06..0.3),
            b: rng.random_range(0.06..0.3),
            angle: rng.random_range(0.0..PI),
            value: rng.random_range(-0.25..0.6),
        });
    }
    let (fx, fy, phase) = (
        rng.random_range(2.0..6.0),
        rng.random_range(2.0..6.0),
        rng.random_range(0.0..2.0 * PI),
    );

    let outline = &ellipses[0];
    let mut img = vec![0.0; n * n];
    for iy in 0..n {
        let y = 2.0 * (iy as f64 + 0.5) / n as f64 - 1.0;
        for ix in 0..n {
            let x = 2.0 * (ix as f64 + 0.5) / n as f64 - 1.0;
            if !outline.contains(x, y) {
                continue;
            }
            let tissue: f64 = ellipses
                .iter()
                .filter(|e| e.contains(x, y))
                .map(|e| e.value)
                .sum::<f64>()
                .clamp(0.0, 1.0);
            let mut v = spec.contrast.background + (1.0 - spec.contrast.background) * tissue.powf(spec.contrast.gamma);
            if spec.kind == PhantomKind::TexturedPhantom {
                v *= 1.0 + spec.contrast.texture * (2.0 * PI * (fx * x + fy * y) / 2.0 + phase).sin();
            }
            img[iy * n + ix] = v.max(0.0);
        }
    }
    let max = img.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        img.iter_mut().for_each(|v| *v /= max);
    }
    img
}

fn with_smooth_phase<R: Rng>(mag: &[f64], n: usize, rng: &mut R) -> ComplexImage {
    let a = rng.random_range(-PI / 4.0..PI / 4.0);
    let b = rng.random_range(-PI / 4.0..PI / 4.0);
    let c = rng.random_range(-PI / 4.0..PI / 4.0);
    let offset = rng.random_range(-PI..PI);
    let mut img = ComplexImage::zeros(n, n);
    for iy in 0..n {
        let y = 2.0 * (iy as f64 + 0.5) / n as f64 - 1.0;
        for ix in 0..n {
            let x = 2.0 * (ix as f64 + 0.5) / n as f64 - 1.0;
            let phi = offset + a * x + b * y + c * (x * x + y * y);
            let k = iy * n + ix;
            img.re[k] = mag[k] * phi.cos();
            img.im[k] = mag[k] * phi.sin();
        }
    }
    img
}

/// Generate `count` phantoms measured through `mask`, with optional k-space
/// noise of the given complex variance.
pub fn make_phantoms(
    spec: &PhantomSpec,
    mask: &Arc<SamplingMask>,
    count: usize,
    noise_variance: f64,
) -> Result<Vec<PhantomSample>, MriError> {
    check_size(spec.size, spec.size)?;
    if count == 0 {
        return Err(MriError::MaskConfig("phantom count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..count)
        .map(|_| {
            let mag = magnitude_image(spec, &mut rng);
            let truth = with_smooth_phase(&mag, spec.size, &mut rng);
            let clean = forward_op(&truth, mask)?;
            let noise_seed: u64 = rng.random();
            let kspace = add_noise(&clean, mask, noise_variance, noise_seed)?;
            Ok(PhantomSample {
                truth,
                kspace,
                mask: Arc::clone(mask),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mri::{make_mask, MaskPattern, MaskSpec};

    fn spec(gamma: f64, seed: u64) -> PhantomSpec {
        PhantomSpec {
            kind: PhantomKind::EllipsePhantom,
            size: 64,
            contrast: ContrastParams { gamma, ..Default::default() },
            seed,
        }
    }

    fn mask() -> Arc<SamplingMask> {
        Arc::new(make_mask(&MaskSpec::new(MaskPattern::Random1d, 4, 0.08, 1), 64, 64).unwrap())
    }

    #[test]
    fn magnitudes_in_unit_range() {
        for kind in [PhantomKind::EllipsePhantom, PhantomKind::TexturedPhantom] {
            let s = PhantomSpec { kind, ..spec(1.3, 5) };
            for p in make_phantoms(&s, &mask(), 6, 0.0).unwrap() {
                let mag = p.truth.magnitude();
                assert!(mag.iter().all(|&m| (0.0..=1.0 + 1e-12).contains(&m)));
                assert!(mag.iter().cloned().fold(0.0, f64::max) > 0.99);
            }
        }
    }

    #[test]
    fn kspace_is_forward_of_truth() {
        let m = mask();
        for p in make_phantoms(&spec(1.0, 3), &m, 3, 0.0).unwrap() {
            assert_eq!(p.kspace, forward_op(&p.truth, &m).unwrap());
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_phantoms(&spec(1.0, 8), &mask(), 2, 0.01).unwrap();
        let b = make_phantoms(&spec(1.0, 8), &mask(), 2, 0.01).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.truth, y.truth);
            assert_eq!(x.kspace, y.kspace);
        }
    }

    fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let mut values: Vec<f64> = a.iter().chain(&b).cloned().collect();
        values.sort_by(f64::total_cmp);
        values
            .iter()
            .map(|&v| {
                let fa = a.partition_point(|&x| x <= v) as f64 / a.len() as f64;
                let fb = b.partition_point(|&x| x <= v) as f64 / b.len() as f64;
                (fa - fb).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn contrast_changes_histogram() {
        let m = mask();
        let pixels = |s: PhantomSpec| -> Vec<f64> {
            make_phantoms(&s, &m, 8, 0.0)
                .unwrap()
                .iter()
                .flat_map(|p| p.truth.magnitude())
                .filter(|&v| v > 0.0)
                .collect()
        };
        let a = pixels(spec(0.6, 1));
        let b = pixels(spec(1.8, 2));
        let d = ks_statistic(a, b);
        assert!(d > 0.1, "KS statistic {d}");
    }

    #[test]
    fn zero_count_rejected() {
        assert!(make_phantoms(&spec(1.0, 0), &mask(), 0, 0.0).is_err());
    }
}
