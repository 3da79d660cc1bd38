use crate::autodiff::ParamSet;

use super::FedError;

/// Server-side model `Θ_C` and the weights used for the latest aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub model: ParamSet,
    pub alpha: Vec<f64>,
    /// Rounds completed so far.
    pub round: usize,
    pub total_rounds: usize,
}

/// `α_k = exp(L_k) / Σ_j exp(L_j)`, computed with the maximum subtracted.
pub fn adaptive_weights(losses: &[f64]) -> Result<Vec<f64>, FedError> {
    if losses.is_empty() {
        return Err(FedError::Protocol("no client losses to weight".into()));
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(FedError::Protocol(format!(
            "client {i} reported non-finite loss {}",
            losses[i]
        )));
    }
    let peak = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = losses.iter().map(|l| (l - peak).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

/// `α_k = N_k / N`.
pub fn fedavg_weights(counts: &[usize]) -> Result<Vec<f64>, FedError> {
    let total: usize = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return Err(FedError::Config("sample counts sum to zero".into()));
    }
    if let Some(i) = counts.iter().position(|&n| n == 0) {
        return Err(FedError::Config(format!("client {i} has no samples")));
    }
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Tensor-wise `Σ_k α_k Θ_k` over every named parameter. Tags follow the
/// first set.
pub fn aggregate(sets: &[&ParamSet], alpha: &[f64]) -> Result<ParamSet, FedError> {
    if sets.is_empty() || sets.len() != alpha.len() {
        return Err(FedError::Protocol(format!(
            "{} parameter sets but {} weights",
            sets.len(),
            alpha.len()
        )));
    }
    let sum: f64 = alpha.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || alpha.iter().any(|a| !a.is_finite()) {
        return Err(FedError::Protocol(format!("aggregation weights sum to {sum}")));
    }
    for (k, s) in sets.iter().enumerate().skip(1) {
        if !sets[0].is_compatible(s) {
            return Err(FedError::Protocol(format!(
                "client {k} parameter names or shapes differ from client 0"
            )));
        }
    }
    let mut out = sets[0].clone();
    for p in out.iter_mut() {
        let mut acc = p.tensor.scale(alpha[0]);
        for (s, &a) in sets.iter().zip(alpha).skip(1) {
            acc.axpy(a, s.tensor(&p.name).expect("compatible sets"))?;
        }
        p.tensor = acc;
    }
    Ok(out)
}
