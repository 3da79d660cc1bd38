//! Unrolled reconstruction network: a shared residual attention denoiser
//! alternating with conjugate-gradient data consistency.

pub mod blocks;
pub mod checkpoint;
mod partition;
mod unrolled;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    inverse_softplus, softplus, Graph, GraphError, LinearOp, ParamSet, Parameter, ShapeError, Tensor,
};
use crate::mri::{adjoint_op, ComplexImage, KSpace, MriError, NormalOperator, SamplingMask};

pub use blocks::{laplacian_attention, rslam, slam, spatial_attention, BODY_STAGES, PYRAMID_DILATIONS};
pub use partition::{partition_params, PartitionScheme};
pub use unrolled::{cg_on_graph, lambda_node, unrolled_forward};

/// Name of the raw scalar `ρ` with `λ = softplus(ρ)`.
pub const LAMBDA_PARAM: &str = "dc.rho";

#[derive(Debug, Error)]
pub enum ReconError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Mri(#[from] MriError),
    #[error("data-consistency solve diverged at unroll step {step}, CG iteration {iteration}")]
    Diverged { step: usize, iteration: usize },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    /// Hidden channel width of the denoiser.
    pub hidden: usize,
    /// Number of denoise/data-consistency alternations `J`.
    pub depth: usize,
    pub cg_max_iters: usize,
    pub cg_tol: f64,
    /// Initial regularization weight `λ`.
    pub lambda_init: f64,
    /// Scale applied to the initial weights of the residual output conv.
    pub final_init_scale: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            hidden: 16,
            depth: 2,
            cg_max_iters: 10,
            cg_tol: 1e-6,
            lambda_init: 0.05,
            final_init_scale: 0.1,
        }
    }
}

/// `(name, shape)` for every tensor of a model with hidden width `c`.
pub fn param_names(c: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for i in 0..2 * BODY_STAGES {
        let c_in = if i == 0 { 2 } else { c };
        out.push((format!("rslam.body.{i}.weight"), vec![c, c_in, 3, 3]));
        out.push((format!("rslam.body.{i}.bias"), vec![c]));
    }
    out.push(("rslam.slam.spatial.weight".into(), vec![1, 2, 7, 7]));
    out.push(("rslam.slam.spatial.bias".into(), vec![1]));
    for branch in ["avg", "max"] {
        for d in PYRAMID_DILATIONS {
            out.push((format!("rslam.slam.lap.{branch}.d{d}.weight"), vec![c, c, 3, 3]));
        }
    }
    for branch in ["avg", "max"] {
        out.push((format!("rslam.slam.lap.fuse_{branch}.weight"), vec![c, 3 * c, 3, 3]));
        out.push((format!("rslam.slam.lap.fuse_{branch}.bias"), vec![c]));
    }
    out.push(("rslam.final.weight".into(), vec![2, c, 3, 3]));
    out.push(("rslam.final.bias".into(), vec![2]));
    out.push((LAMBDA_PARAM.into(), vec![1]));
    out
}

/// Shared-weight unrolled network. Value-like: clone it to hand a copy to
/// another worker.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrolledModel {
    pub config: ReconConfig,
    pub params: ParamSet,
}

impl UnrolledModel {
    /// He-normal convolution weights, zero biases, `ρ = softplus⁻¹(λ_init)`.
    pub fn new(config: ReconConfig, seed: u64) -> Result<Self, ReconError> {
        if config.depth == 0 {
            return Err(ReconError::Config("unroll depth must be >= 1".into()));
        }
        if config.hidden == 0 {
            return Err(ReconError::Config("hidden width must be >= 1".into()));
        }
        if !(config.lambda_init > 0.0) {
            return Err(ReconError::Config(format!(
                "initial lambda must be positive, got {}",
                config.lambda_init
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in param_names(config.hidden) {
            let tensor = if name == LAMBDA_PARAM {
                Tensor::scalar(inverse_softplus(config.lambda_init))
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let mut std = (2.0 / fan_in as f64).sqrt();
                if name.starts_with("rslam.final") {
                    std *= config.final_init_scale;
                }
                Tensor::randn(&shape, std, &mut rng)
            };
            params.insert(Parameter::new(name, tensor));
        }
        Ok(UnrolledModel { config, params })
    }

    /// Current `λ = softplus(ρ)`.
    pub fn lambda(&self) -> f64 {
        softplus(self.params.tensor(LAMBDA_PARAM).expect("lambda parameter").item())
    }

    pub fn param_count(&self) -> usize {
        self.params.element_count()
    }

    /// Inference from undersampled k-space: `m⁰ = Aᴴb`, then `J` alternations.
    pub fn reconstruct(&self, b: &KSpace, mask: &Arc<SamplingMask>) -> Result<ComplexImage, ReconError> {
        let zero_filled = adjoint_op(b, mask)?;
        self.reconstruct_from(&zero_filled, mask)
    }

    /// Inference from a precomputed zero-filled image.
    pub fn reconstruct_from(
        &self,
        zero_filled: &ComplexImage,
        mask: &Arc<SamplingMask>,
    ) -> Result<ComplexImage, ReconError> {
        let normal: Arc<dyn LinearOp> = Arc::new(NormalOperator::new(Arc::clone(mask)));
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let x = g.constant(zero_filled.to_tensor());
        let out = unrolled_forward(&mut g, &bound, x, &normal, &self.config)?;
        Ok(ComplexImage::from_tensor(g.value(out))?)
    }
}
