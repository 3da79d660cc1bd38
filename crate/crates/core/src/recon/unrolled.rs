use std::sync::Arc;

use crate::autodiff::{BoundParams, Graph, LinearOp, Tensor, Var};

use super::blocks::rslam;
use super::{ReconConfig, ReconError};

/// Conjugate gradients for `(N + λI) x = rhs` recorded on the graph, so the
/// fixed sequence of iterations is differentiated exactly. Starts from
/// `x = 0` and stops when the relative residual reaches `tol`.
///
/// Returns the solution and the number of iterations run.
pub fn cg_on_graph(
    g: &mut Graph,
    normal: &Arc<dyn LinearOp>,
    rhs: Var,
    lambda: Var,
    max_iters: usize,
    tol: f64,
) -> Result<(Var, usize), ReconError> {
    let mut r = rhs;
    let mut p = rhs;
    let mut rr = g.dot(r, r)?;
    let rhs_norm = g.value(rr).item().sqrt();
    if rhs_norm == 0.0 {
        let shape = g.value(rhs).shape().to_vec();
        return Ok((g.constant(Tensor::zeros(&shape)), 0));
    }
    let mut x: Option<Var> = None;
    let mut iterations = 0;
    while iterations < max_iters && g.value(rr).item().sqrt() / rhs_norm > tol {
        let np = g.linear(p, Arc::clone(normal));
        let lp = g.scale_by(p, lambda)?;
        let ap = g.add(np, lp)?;
        let pap = g.dot(p, ap)?;
        let alpha = g.div(rr, pap)?;
        let step = g.scale_by(p, alpha)?;
        x = Some(match x {
            Some(prev) => g.add(prev, step)?,
            None => step,
        });
        let dr = g.scale_by(ap, alpha)?;
        r = g.sub(r, dr)?;
        let rr_new = g.dot(r, r)?;
        iterations += 1;
        if !g.value(rr_new).item().is_finite() {
            return Err(ReconError::Diverged { step: 0, iteration: iterations });
        }
        let beta = g.div(rr_new, rr)?;
        let bp = g.scale_by(p, beta)?;
        p = g.add(r, bp)?;
        rr = rr_new;
    }
    let x = match x {
        Some(x) => x,
        None => {
            let shape = g.value(rhs).shape().to_vec();
            g.constant(Tensor::zeros(&shape))
        }
    };
    Ok((x, iterations))
}

/// `λ = softplus(ρ)` as a graph node.
pub fn lambda_node(g: &mut Graph, p: &BoundParams) -> Var {
    g.softplus(p.var(super::LAMBDA_PARAM))
}

/// `J` alternations of denoising and data consistency starting from the
/// zero-filled image `aᴴb` (a `2×H×W` node). Returns `m^J`.
pub fn unrolled_forward(
    g: &mut Graph,
    p: &BoundParams,
    zero_filled: Var,
    normal: &Arc<dyn LinearOp>,
    config: &ReconConfig,
) -> Result<Var, ReconError> {
    if config.depth == 0 {
        return Err(ReconError::Config("unroll depth must be >= 1".into()));
    }
    let lambda = lambda_node(g, p);
    let mut m = zero_filled;
    for step in 0..config.depth {
        let r = rslam(g, p, m)?;
        let lr = g.scale_by(r, lambda)?;
        let rhs = g.add(zero_filled, lr)?;
        m = cg_on_graph(g, normal, rhs, lambda, config.cg_max_iters, config.cg_tol)
            .map_err(|e| match e {
                ReconError::Diverged { iteration, .. } => ReconError::Diverged { step, iteration },
                other => other,
            })?
            .0;
    }
    Ok(m)
}
