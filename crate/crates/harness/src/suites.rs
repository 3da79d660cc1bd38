//! Oracle self-test: fast paths against their straight-line references.

use modfed::autodiff::{conv2d, Tensor};
use modfed::fed::{adaptive_weights, aggregate};
use modfed::metrics::{psnr, ssim, MetricConfig};
use modfed::mri::{cg_solve, fft2c, make_mask, ComplexImage, MaskPattern, MaskSpec};
use modfed::oracles::{conv2d_nested_loop, dft2c_naive, ssim_per_window, tikhonov_diagonal};
use modfed::autodiff::{ParamSet, Parameter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst observed error (or deviation) for this check.
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Conjugate gradients against the Fourier-diagonal closed form on 20
/// random masked 32×32 systems. Returns the worst relative error.
pub fn cg_oracle(seed: u64) -> CheckResult {
    let n = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patterns = [MaskPattern::Random1d, MaskPattern::Uniform1d, MaskPattern::Random2d];
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let spec = MaskSpec::new(patterns[i % 3], 2 + i % 4, 0.1, rng.random());
        let mask = make_mask(&spec, n, n).expect("valid mask");
        let lambda = 10f64.powf(rng.random_range(-2.0..0.5));
        let rhs = ComplexImage::from_parts(n, n, uniform(&mut rng, n * n), uniform(&mut rng, n * n));
        let sol = cg_solve(&rhs, &mask, lambda, 200, 1e-14).expect("cg");
        let (or, oi) = tikhonov_diagonal(&rhs.re, &rhs.im, mask.grid(), n, n, lambda);
        let got: Vec<f64> = sol.image.re.iter().chain(&sol.image.im).copied().collect();
        let want: Vec<f64> = or.iter().chain(&oi).copied().collect();
        worst = worst.max(rel_err(&got, &want));
    }
    CheckResult {
        name: "cg vs closed-form Tikhonov, 20 systems 32x32".into(),
        error: worst,
        tolerance: 1e-8,
    }
}

fn fft_oracle(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst: f64 = 0.0;
    for (h, w) in [(8, 8), (16, 32), (32, 16)] {
        let x = ComplexImage::from_parts(h, w, uniform(rng, h * w), uniform(rng, h * w));
        let k = fft2c(&x).expect("fft");
        let (re, im) = dft2c_naive(&x.re, &x.im, h, w, false);
        let got: Vec<f64> = k.re.iter().chain(&k.im).copied().collect();
        let want: Vec<f64> = re.iter().chain(&im).copied().collect();
        worst = worst.max(rel_err(&got, &want));
    }
    CheckResult {
        name: "fft vs naive DFT".into(),
        error: worst,
        tolerance: 1e-12,
    }
}

fn conv_oracle(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst: f64 = 0.0;
    for d in [1, 2, 3] {
        let (c_in, c_out, h, w) = (3, 4, 9, 7);
        let x = uniform(rng, c_in * h * w);
        let k = uniform(rng, c_out * c_in * 9);
        let fast = conv2d(
            &Tensor::new(&[c_in, h, w], x.clone()).expect("shape"),
            &Tensor::new(&[c_out, c_in, 3, 3], k.clone()).expect("shape"),
            d,
        )
        .expect("conv");
        let slow = conv2d_nested_loop(&x, (c_in, h, w), &k, (c_out, 3), d);
        worst = worst.max(rel_err(fast.data(), &slow));
    }
    CheckResult {
        name: "conv2d vs nested loop, dilations 1-3".into(),
        error: worst,
        tolerance: 1e-12,
    }
}

fn ssim_oracle(rng: &mut ChaCha8Rng) -> CheckResult {
    let cfg = MetricConfig::default();
    let n = 32;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let fast = ssim(&x, &y, n, n, &cfg).expect("ssim");
        let slow = ssim_per_window(&x, &y, n, n, cfg.window, cfg.sigma, cfg.data_range, cfg.k1, cfg.k2);
        worst = worst.max((fast - slow).abs());
    }
    let same: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
    worst = worst.max((ssim(&same, &same, n, n, &cfg).expect("ssim") - 1.0).abs());
    CheckResult {
        name: "ssim vs per-window oracle, 10 pairs; ssim(x,x)=1".into(),
        error: worst,
        tolerance: 1e-10,
    }
}

fn psnr_check() -> CheckResult {
    let x = vec![0.1; 64];
    let y = vec![0.0; 64];
    let v = psnr(&x, &y, 1.0).expect("psnr");
    CheckResult {
        name: "psnr of 0.1 offset at L=1 is 20 dB".into(),
        error: (v - 20.0).abs(),
        tolerance: f64::EPSILON,
    }
}

fn softmax_check() -> CheckResult {
    let a = adaptive_weights(&[0.0, 2f64.ln()]).expect("weights");
    let mut err = (a[0] - 1.0 / 3.0).abs().max((a[1] - 2.0 / 3.0).abs());
    let shifted = adaptive_weights(&[5.0, 5.0 + 2f64.ln()]).expect("weights");
    err = err.max((a[0] - shifted[0]).abs()).max((a[1] - shifted[1]).abs());
    err = err.max((a.iter().sum::<f64>() - 1.0).abs());
    CheckResult {
        name: "softmax weights [0, ln 2] -> [1/3, 2/3]".into(),
        error: err,
        tolerance: 1e-12,
    }
}

fn one_hot_aggregate_check(rng: &mut ChaCha8Rng) -> CheckResult {
    let set = |rng: &mut ChaCha8Rng| {
        let mut p = ParamSet::new();
        p.insert(Parameter::new("w", Tensor::randn(&[4, 3], 1.0, rng)));
        p
    };
    let a = set(rng);
    let b = set(rng);
    let out = aggregate(&[&a, &b], &[1.0, 0.0]).expect("aggregate");
    let diff = out.tensor("w").expect("w").max_abs_diff(a.tensor("w").expect("w")).expect("shape");
    CheckResult {
        name: "aggregate with alpha=[1,0] copies client 1".into(),
        // exact copy required
        error: if diff == 0.0 { 0.0 } else { f64::INFINITY },
        tolerance: f64::MIN_POSITIVE,
    }
}

pub fn selftest(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        cg_oracle(seed),
        fft_oracle(&mut rng),
        conv_oracle(&mut rng),
        ssim_oracle(&mut rng),
        psnr_check(),
        softmax_check(),
        one_hot_aggregate_check(&mut rng),
    ]
}
