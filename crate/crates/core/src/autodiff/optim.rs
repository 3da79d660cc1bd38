use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{GradMap, OptimError, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Tensor,
    second: Tensor,
}

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimState {
    moments: IndexMap<String, Moments>,
    step: u64,
}

impl OptimState {
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.moments.get(name).map(|m| &m.first)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.moments.get(name).map(|m| &m.second)
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: OptimState::default(),
        }
    }

    /// Apply one update to every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap) -> Result<(), OptimError> {
        for p in params.iter() {
            let g = grads.get(&p.name).ok_or_else(|| OptimError::MissingGradient {
                name: p.name.clone(),
            })?;
            if g.shape() != p.tensor.shape() {
                return Err(OptimError::Shape {
                    name: p.name.clone(),
                    param: p.tensor.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    name: p.name.clone(),
                    index: i,
                });
            }
        }

        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for p in params.iter_mut() {
            let g = &grads[&p.name];
            let m = self
                .state
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| Moments {
                    first: Tensor::zeros(g.shape()),
                    second: Tensor::zeros(g.shape()),
                });
            let theta = p.tensor.data_mut();
            let first = m.first.data_mut();
            let second = m.second.data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                theta[i] -= lr * weight_decay * theta[i];
                first[i] = beta1 * first[i] + (1.0 - beta1) * gi;
                second[i] = beta2 * second[i] + (1.0 - beta2) * gi * gi;
                let m_hat = first[i] / bc1;
                let v_hat = second[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
