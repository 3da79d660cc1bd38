//! Central finite-difference checks of reverse-mode gradients.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BoundParams, Graph, LinearOp, ParamSet, Parameter, PoolMode, Tensor, Var};
use crate::mri::{adjoint_op, forward_op, ComplexImage, MaskPattern, MaskSpec, NormalOperator, SamplingMask};
use crate::recon::{rslam, unrolled_forward, ReconConfig, UnrolledModel, LAMBDA_PARAM};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Entries probed per tensor; tensors with fewer entries are checked fully.
    pub entries_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            entries_per_tensor: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    /// `max |analytic − numeric| / max(max |numeric|, max |analytic|, 1e-8)`
    /// over the probed entries.
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// Compare the reverse-mode gradient of `loss_fn` against central differences
/// for every tensor in `params`.
pub fn check<F>(params: &ParamSet, config: &GradCheckConfig, loss_fn: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &BoundParams) -> Var,
{
    let evaluate = |p: &ParamSet| -> f64 {
        let mut g = Graph::new();
        let bound = p.bind_frozen(&mut g);
        let loss = loss_fn(&mut g, &bound);
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = loss_fn(&mut g, &bound);
    let loss_value = g.value(loss).item();
    let mut grads = g.backward(loss).expect("scalar loss");
    let analytic = bound.gradients(&mut grads);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work = params.clone();
    let mut tensors = Vec::new();
    for p in params.iter() {
        let n = p.tensor.len();
        let picks: Vec<usize> = if n <= config.entries_per_tensor {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, config.entries_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let a = &analytic[&p.name];
        let mut max_abs: f64 = 0.0;
        let mut scale: f64 = 1e-8;
        for &i in &picks {
            let orig = p.tensor.data()[i];
            work.tensor_mut(&p.name).unwrap().data_mut()[i] = orig + config.step;
            let plus = evaluate(&work);
            work.tensor_mut(&p.name).unwrap().data_mut()[i] = orig - config.step;
            let minus = evaluate(&work);
            work.tensor_mut(&p.name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * config.step);
            let analytic = a.data()[i];
            max_abs = max_abs.max((numeric - analytic).abs());
            scale = scale.max(numeric.abs()).max(analytic.abs());
        }
        tensors.push(TensorCheck {
            name: p.name.clone(),
            checked: picks.len(),
            max_abs_error: max_abs,
            rel_error: max_abs / scale,
        });
    }
    GradCheckReport {
        loss: loss_value,
        tensors,
    }
}

/// One entry of [`suite`].
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let shape = g.value(v).shape().to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    g.dot(v, w).expect("same shape")
}

fn params_of(tensors: Vec<(&str, Tensor)>) -> ParamSet {
    let mut p = ParamSet::new();
    for (n, t) in tensors {
        p.insert(Parameter::new(n, t));
    }
    p
}

/// Finite-difference checks of every differentiable op (tolerance `1e-4`),
/// the residual attention block (`1e-4`) and the full unrolled model on
/// 8×8 images with `J = 2` (`1e-3`).
pub fn suite() -> Vec<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    let all = GradCheckConfig {
        entries_per_tensor: 1000,
        ..Default::default()
    };
    let mut run = |name: &str, tol: f64, cfg: &GradCheckConfig, params: &ParamSet, f: &dyn Fn(&mut Graph, &BoundParams) -> Var| {
        let report = check(params, cfg, f);
        out.push(SuiteEntry {
            name: name.to_string(),
            max_rel_error: report.max_rel_error(),
            tolerance: tol,
        });
    };

    let x = Tensor::randn(&[3, 5, 5], 1.0, &mut rng);
    let conv = params_of(vec![("x", x.clone()), ("k", Tensor::randn(&[2, 3, 3, 3], 0.5, &mut rng))]);
    for d in [1, 2, 3] {
        run(&format!("conv2d dilation {d}"), 1e-4, &all, &conv, &|g, b| {
            let y = g.conv2d(b.var("x"), b.var("k"), d).unwrap();
            project(g, y, 1)
        });
    }
    let unary = params_of(vec![("x", x.clone())]);
    run("relu", 1e-4, &all, &unary, &|g, b| {
        let y = g.relu(b.var("x"));
        project(g, y, 2)
    });
    run("sigmoid", 1e-4, &all, &unary, &|g, b| {
        let y = g.sigmoid(b.var("x"));
        project(g, y, 3)
    });
    run("softplus", 1e-4, &all, &unary, &|g, b| {
        let y = g.softplus(b.var("x"));
        project(g, y, 4)
    });
    run("scale", 1e-4, &all, &unary, &|g, b| {
        let y = g.scale(b.var("x"), -1.5);
        project(g, y, 5)
    });
    run("norm", 1e-4, &all, &unary, &|g, b| g.norm(b.var("x")));
    run("sum", 1e-4, &all, &unary, &|g, b| g.sum(b.var("x")));
    for (mode, label) in [(PoolMode::Avg, "avg"), (PoolMode::Max, "max")] {
        run(&format!("channel_pool {label}"), 1e-4, &all, &unary, &|g, b| {
            let y = g.channel_pool(b.var("x"), mode).unwrap();
            project(g, y, 6)
        });
        run(&format!("global_pool {label}"), 1e-4, &all, &unary, &|g, b| {
            let y = g.global_pool(b.var("x"), mode).unwrap();
            project(g, y, 7)
        });
    }
    let binary = params_of(vec![("x", x.clone()), ("y", Tensor::randn(&[3, 5, 5], 1.0, &mut rng))]);
    run("add/sub/mul", 1e-4, &all, &binary, &|g, b| {
        let m = g.mul(b.var("x"), b.var("y")).unwrap();
        let s = g.sub(m, b.var("x")).unwrap();
        let a = g.add(s, b.var("y")).unwrap();
        project(g, a, 8)
    });
    run("concat", 1e-4, &all, &binary, &|g, b| {
        let c = g.concat(&[b.var("y"), b.var("x")]).unwrap();
        project(g, c, 9)
    });
    for (label, shape) in [("channel", [3, 1, 1]), ("spatial", [1, 5, 5]), ("same", [3, 5, 5])] {
        let p = params_of(vec![("x", x.clone()), ("s", Tensor::randn(&shape, 1.0, &mut rng))]);
        run(&format!("broadcast_mul {label}"), 1e-4, &all, &p, &|g, b| {
            let y = g.broadcast_mul(b.var("x"), b.var("s")).unwrap();
            project(g, y, 10)
        });
    }
    let bias = params_of(vec![("x", x.clone()), ("b", Tensor::randn(&[3], 1.0, &mut rng))]);
    run("add_channel_bias", 1e-4, &all, &bias, &|g, b| {
        let y = g.add_channel_bias(b.var("x"), b.var("b")).unwrap();
        project(g, y, 11)
    });
    let scalars = params_of(vec![("v", Tensor::randn(&[6], 1.0, &mut rng)), ("s", Tensor::scalar(0.7))]);
    run("dot/div/scale_by", 1e-4, &all, &scalars, &|g, b| {
        let d = g.dot(b.var("v"), b.var("v")).unwrap();
        let q = g.div(d, b.var("s")).unwrap();
        let y = g.scale_by(b.var("v"), q).unwrap();
        let y = g.scale_by(y, q).unwrap();
        project(g, y, 12)
    });

    let mask = {
        let grid = (0..64).map(|_| rng.random_bool(0.4) as u8).collect();
        let spec = MaskSpec::new(MaskPattern::Random2d, 2, 0.0, 0);
        Arc::new(SamplingMask::from_grid(spec, 8, 8, grid).expect("binary grid"))
    };
    let normal: Arc<dyn LinearOp> = Arc::new(NormalOperator::new(Arc::clone(&mask)));
    let image = params_of(vec![("x", Tensor::randn(&[2, 8, 8], 1.0, &mut rng))]);
    run("normal operator", 1e-4, &all, &image, &|g, b| {
        let y = g.linear(b.var("x"), Arc::clone(&normal));
        project(g, y, 13)
    });

    let block = ReconConfig {
        hidden: 4,
        ..ReconConfig::default()
    };
    let mut model = UnrolledModel::new(block, 7).expect("valid config");
    for p in model.params.iter_mut() {
        if p.name.ends_with(".bias") {
            p.tensor = Tensor::randn(p.tensor.shape(), 0.1, &mut rng);
        }
    }
    let input = Tensor::randn(&[2, 6, 6], 1.0, &mut rng);
    let mut only_rslam = ParamSet::new();
    for p in model.params.iter().filter(|p| p.name != LAMBDA_PARAM) {
        only_rslam.insert(p.clone());
    }
    let sampled = GradCheckConfig::default();
    run("rslam block", 1e-4, &sampled, &only_rslam, &|g, b| {
        let xv = g.constant(input.clone());
        let y = rslam(g, b, xv).unwrap();
        project(g, y, 14)
    });

    let full = ReconConfig {
        hidden: 4,
        depth: 2,
        cg_max_iters: 3,
        cg_tol: 0.0,
        ..ReconConfig::default()
    };
    let mut model = UnrolledModel::new(full, 8).expect("valid config");
    model.params.tensor_mut(LAMBDA_PARAM).expect("lambda").data_mut()[0] = 0.3;
    let truth = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
    let zero_filled = {
        let t = ComplexImage::from_tensor(&truth).expect("2×H×W");
        adjoint_op(&forward_op(&t, &mask).expect("shape"), &mask).expect("shape").to_tensor()
    };
    run("unrolled model (8×8, J=2)", 1e-3, &sampled, &model.params, &|g, b| {
        let xv = g.constant(zero_filled.clone());
        let m = unrolled_forward(g, b, xv, &normal, &full).unwrap();
        let t = g.constant(truth.clone());
        let d = g.sub(m, t).unwrap();
        g.norm(d)
    });
    out
}
