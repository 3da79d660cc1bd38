//! PSNR, windowed SSIM and the generalization report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mri::{ComplexImage, PhantomSample};
use crate::recon::{ReconError, UnrolledModel};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("images differ in size: {left} vs {right} values")]
    Shape { left: usize, right: usize },
    #[error("image {h}×{w} is smaller than the {window}×{window} window")]
    WindowTooLarge { h: usize, w: usize, window: usize },
    #[error("invalid metric config: {0}")]
    Config(String),
    #[error(transparent)]
    Recon(#[from] ReconError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    /// Dynamic range `L`.
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
    /// Side of the square Gaussian window (odd).
    pub window: usize,
    pub sigma: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            data_range: 1.0,
            k1: 0.01,
            k2: 0.03,
            window: 11,
            sigma: 1.5,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if !(self.data_range > 0.0) || !(self.k1 > 0.0) || !(self.k2 > 0.0) || !(self.sigma > 0.0) {
            return Err(MetricError::Config(
                "data_range, k1, k2 and sigma must be positive".into(),
            ));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(MetricError::Config(format!("window must be odd, got {}", self.window)));
        }
        Ok(())
    }
}

fn same_len(x: &[f64], y: &[f64]) -> Result<(), MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::Shape {
            left: x.len(),
            right: y.len(),
        });
    }
    Ok(())
}

/// `10·log10(L² / MSE)` in dB, evaluated as `20·log10(L / RMSE)`.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr(x: &[f64], reference: &[f64], data_range: f64) -> Result<f64, MetricError> {
    same_len(x, reference)?;
    if !(data_range > 0.0) {
        return Err(MetricError::Config("data_range must be positive".into()));
    }
    // scaled by the largest deviation, as in a robust 2-norm
    let peak = x.iter().zip(reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if peak == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mean_sq = x.iter().zip(reference).map(|(a, b)| ((a - b) / peak).powi(2)).sum::<f64>() / x.len() as f64;
    let rmse = peak * mean_sq.sqrt();
    Ok(20.0 * (data_range / rmse).log10())
}

fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Valid-mode separable filter: rows first, then columns.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &img[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, t) in taps.iter().enumerate() {
            let src = &rows[(y + i) * ow..(y + i + 1) * ow];
            for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += t * v;
            }
        }
    }
    out
}

/// Mean structural similarity over every fully contained Gaussian window.
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize, config: &MetricConfig) -> Result<f64, MetricError> {
    config.validate()?;
    same_len(x, y)?;
    if x.len() != h * w {
        return Err(MetricError::Shape {
            left: x.len(),
            right: h * w,
        });
    }
    if h < config.window || w < config.window {
        return Err(MetricError::WindowTooLarge {
            h,
            w,
            window: config.window,
        });
    }
    let taps = gaussian_taps(config.window, config.sigma);
    let product = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let mx = filter_valid(x, h, w, &taps);
    let my = filter_valid(y, h, w, &taps);
    let mxx = filter_valid(&product(x, x), h, w, &taps);
    let myy = filter_valid(&product(y, y), h, w, &taps);
    let mxy = filter_valid(&product(x, y), h, w, &taps);

    let c1 = (config.k1 * config.data_range).powi(2);
    let c2 = (config.k2 * config.data_range).powi(2);
    let mut acc = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(acc / mx.len() as f64)
}

/// Magnitudes of `recon` and `reference`, both divided by the reference's
/// peak magnitude.
pub fn normalized_magnitudes(recon: &ComplexImage, reference: &ComplexImage) -> (Vec<f64>, Vec<f64>) {
    let r = reference.magnitude();
    let peak = r.iter().cloned().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let x = recon.magnitude().into_iter().map(|v| v * scale).collect();
    let y = r.into_iter().map(|v| v * scale).collect();
    (x, y)
}

/// PSNR and SSIM of one reconstruction against its reference.
pub fn image_quality(
    recon: &ComplexImage,
    reference: &ComplexImage,
    config: &MetricConfig,
) -> Result<(f64, f64), MetricError> {
    let (h, w) = reference.shape();
    let (x, y) = normalized_magnitudes(recon, reference);
    Ok((psnr(&x, &y, config.data_range)?, ssim(&x, &y, h, w, config)?))
}

/// Training error, testing error and model size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub training_error: f64,
    /// `None` when the test set was empty; serialized as `null`.
    pub testing_error: Option<f64>,
    pub param_count: usize,
    pub sample_count: usize,
}

impl std::fmt::Display for GenReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "train {:.6}", self.training_error)?;
        match self.testing_error {
            Some(e) => write!(f, ", test {e:.6}")?,
            None => write!(f, ", test n/a (empty test set)")?,
        }
        write!(f, ", params {}, samples {}", self.param_count, self.sample_count)
    }
}

/// `‖f(Aᴴb) − m‖₂` for one sample.
pub fn sample_loss(model: &UnrolledModel, sample: &PhantomSample) -> Result<f64, MetricError> {
    let out = model.reconstruct(&sample.kspace, &sample.mask)?;
    Ok(out.to_tensor().sub(&sample.truth.to_tensor()).map_err(ReconError::from)?.norm())
}

fn mean_loss(model: &UnrolledModel, samples: &[PhantomSample]) -> Result<f64, MetricError> {
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(model, s)?;
    }
    Ok(total / samples.len() as f64)
}

pub fn gen_report(
    model: &UnrolledModel,
    train: &[PhantomSample],
    test: &[PhantomSample],
) -> Result<GenReport, MetricError> {
    if train.is_empty() {
        return Err(MetricError::Config("training set is empty".into()));
    }
    Ok(GenReport {
        training_error: mean_loss(model, train)?,
        testing_error: if test.is_empty() { None } else { Some(mean_loss(model, test)?) },
        param_count: model.param_count(),
        sample_count: train.len(),
    })
}
