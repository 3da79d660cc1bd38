use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{AdamW, BoundParams, GradMap, Graph, LinearOp, ParamSet, PartitionTag, Tensor, Var};
use crate::metrics::{image_quality, MetricConfig};
use crate::mri::{adjoint_op, ComplexImage, NormalOperator, PhantomSample};
use crate::recon::{unrolled_forward, ReconConfig, ReconError, UnrolledModel};

use super::{FedConfig, FedError, RegMode, Strategy};

/// A training pair as the client sees it: the zero-filled input `Aᴴb`, the
/// target image and the normal operator of its mask.
#[derive(Clone)]
pub(crate) struct TrainSample {
    zero_filled: Tensor,
    truth: Tensor,
    normal: Arc<dyn LinearOp>,
}

impl TrainSample {
    fn from_phantom(s: &PhantomSample) -> Result<Self, FedError> {
        Ok(TrainSample {
            zero_filled: adjoint_op(&s.kspace, &s.mask)?.to_tensor(),
            truth: s.truth.to_tensor(),
            normal: Arc::new(NormalOperator::new(Arc::clone(&s.mask))),
        })
    }
}

/// One client's private training data, split into subsets 1 and 2.
#[derive(Clone)]
pub struct ClientData {
    pub id: usize,
    s1: Vec<TrainSample>,
    s2: Vec<TrainSample>,
}

impl std::fmt::Debug for ClientData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientData")
            .field("id", &self.id)
            .field("s1", &self.s1.len())
            .field("s2", &self.s2.len())
            .finish()
    }
}

/// Distinguishes the subset split from per-epoch shuffles in [`keyed_rng`].
const SPLIT_KEY: u64 = u64::MAX;

fn keyed_rng(parts: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

impl ClientData {
    /// Shuffle `samples` with `seed` and put the first `round(n·fraction)`
    /// into subset 1, the rest into subset 2. Both subsets end up non-empty.
    pub fn split(id: usize, samples: &[PhantomSample], fraction: f64, seed: u64) -> Result<Self, FedError> {
        if samples.len() < 2 {
            return Err(FedError::Config(format!(
                "client {id} needs at least 2 samples to form subsets 1 and 2"
            )));
        }
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(FedError::Config(format!("split fraction must be in (0,1), got {fraction}")));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut keyed_rng(&[seed, id as u64, SPLIT_KEY]));
        let n1 = ((samples.len() as f64 * fraction).round() as usize).clamp(1, samples.len() - 1);
        let (a, b) = order.split_at(n1);
        let pick = |idx: &[usize]| -> Vec<PhantomSample> { idx.iter().map(|&i| samples[i].clone()).collect() };
        Self::from_parts(id, &pick(a), &pick(b))
    }

    pub fn from_parts(id: usize, s1: &[PhantomSample], s2: &[PhantomSample]) -> Result<Self, FedError> {
        if s1.is_empty() {
            return Err(FedError::Config(format!("client {id}: subset 1 is empty")));
        }
        Ok(ClientData {
            id,
            s1: s1.iter().map(TrainSample::from_phantom).collect::<Result<_, _>>()?,
            s2: s2.iter().map(TrainSample::from_phantom).collect::<Result<_, _>>()?,
        })
    }

    pub fn s1_len(&self) -> usize {
        self.s1.len()
    }

    pub fn s2_len(&self) -> usize {
        self.s2.len()
    }
}

/// What leaves a client at the end of a round: named tensors and scalar
/// losses, nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub client: usize,
    pub params: ParamSet,
    pub loss_s1: f64,
    pub loss_s2: f64,
    pub loss_server: f64,
    pub sample_count: usize,
}

/// Subset-2 evaluation of one parameter set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct S2Eval {
    pub loss: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

pub struct ClientState {
    pub id: usize,
    pub model: UnrolledModel,
    pub optimizer: AdamW,
    pub gamma: f64,
    data: ClientData,
    /// Full server model received this round, kept frozen.
    server_copy: Option<ParamSet>,
}

impl std::fmt::Debug for ClientState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientState")
            .field("id", &self.id)
            .field("data", &self.data)
            .field("gamma", &self.gamma)
            .field("steps", &self.optimizer.state.step_count())
            .finish()
    }
}

fn loss_node(
    g: &mut Graph,
    p: &BoundParams,
    input: &Tensor,
    target: &Tensor,
    normal: &Arc<dyn LinearOp>,
    config: &ReconConfig,
) -> Result<(Var, Var), ReconError> {
    let x = g.constant(input.clone());
    let out = unrolled_forward(g, p, x, normal, config)?;
    let t = g.constant(target.clone());
    let d = g.sub(out, t)?;
    Ok((g.norm(d), out))
}

fn accumulate(acc: &mut Option<GradMap>, grads: GradMap) -> Result<(), FedError> {
    match acc {
        None => *acc = Some(grads),
        Some(sum) => {
            for (name, g) in grads {
                sum.get_mut(&name).expect("same parameter names").axpy(1.0, &g)?;
            }
        }
    }
    Ok(())
}

impl ClientState {
    pub fn new(data: ClientData, model: UnrolledModel, optimizer: AdamW, gamma: f64) -> Self {
        ClientState {
            id: data.id,
            model,
            optimizer,
            gamma,
            data,
            server_copy: None,
        }
    }

    pub fn data(&self) -> &ClientData {
        &self.data
    }

    pub fn server_copy(&self) -> Option<&ParamSet> {
        self.server_copy.as_ref()
    }

    fn evaluate_s2(&self, params: &ParamSet, metrics: Option<&MetricConfig>) -> Result<S2Eval, FedError> {
        if self.data.s2.is_empty() {
            return Err(FedError::Config(format!("client {}: subset 2 is empty", self.id)));
        }
        let config = &self.model.config;
        let (mut loss, mut psnr, mut ssim) = (0.0, 0.0, 0.0);
        for s in &self.data.s2 {
            let mut g = Graph::new();
            let p = params.bind_frozen(&mut g);
            let (l, out) = loss_node(&mut g, &p, &s.zero_filled, &s.truth, &s.normal, config)?;
            loss += g.value(l).item();
            if let Some(m) = metrics {
                let recon = ComplexImage::from_tensor(g.value(out))?;
                let truth = ComplexImage::from_tensor(&s.truth)?;
                let (a, b) = image_quality(&recon, &truth, m)?;
                psnr += a;
                ssim += b;
            }
        }
        let n = self.data.s2.len() as f64;
        Ok(S2Eval {
            loss: loss / n,
            psnr: metrics.map(|_| psnr / n),
            ssim: metrics.map(|_| ssim / n),
        })
    }

    /// The parameter set `Θ_Cg ∪ Θ_Cl^k`: shared tensors from the stashed
    /// server model, personalized tensors from this client.
    fn mixed_params(&self) -> Result<ParamSet, FedError> {
        let server = self.stash()?;
        let mut mixed = self.model.params.clone();
        for p in mixed.iter_mut() {
            if p.tag() == PartitionTag::GlobalShared {
                p.tensor = server.tensor(&p.name).expect("compatible sets").clone();
            }
        }
        Ok(mixed)
    }

    fn stash(&self) -> Result<&ParamSet, FedError> {
        self.server_copy
            .as_ref()
            .ok_or_else(|| FedError::Protocol(format!("client {} has not received server weights", self.id)))
    }

    pub(crate) fn eval_mixed(&self, metrics: Option<&MetricConfig>) -> Result<S2Eval, FedError> {
        self.evaluate_s2(&self.mixed_params()?, metrics)
    }

    /// Subset-2 evaluation of the client's current model.
    pub(crate) fn eval_own(&self, metrics: Option<&MetricConfig>) -> Result<S2Eval, FedError> {
        self.evaluate_s2(&self.model.params, metrics)
    }

    /// `Z` local epochs on subset 1. Returns the mean minibatch `L_s1`.
    pub(crate) fn train(&mut self, round: usize, config: &FedConfig) -> Result<f64, FedError> {
        let recon = self.model.config;
        let prox = match config.strategy {
            Strategy::FedProx if config.mu > 0.0 => Some(self.stash()?.clone()),
            _ => None,
        };
        let consistency = config.reg_mode == RegMode::Consistency && self.gamma > 0.0;
        let server_outputs = if consistency {
            let server = self.stash()?;
            let mut outs = Vec::with_capacity(self.data.s2.len());
            for s in &self.data.s2 {
                let mut g = Graph::new();
                let p = server.bind_frozen(&mut g);
                let x = g.constant(s.zero_filled.clone());
                let out = unrolled_forward(&mut g, &p, x, &s.normal, &recon)?;
                outs.push(g.value(out).clone());
            }
            if outs.is_empty() {
                return Err(FedError::Config(format!("client {}: subset 2 is empty", self.id)));
            }
            outs
        } else {
            Vec::new()
        };

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut s2_cursor = 0usize;
        for z in 0..config.local_epochs {
            let epoch = (round * config.local_epochs + z) as u64;
            let mut order: Vec<usize> = (0..self.data.s1.len()).collect();
            order.shuffle(&mut keyed_rng(&[config.shuffle_seed, self.id as u64, epoch]));

            for batch in order.chunks(config.batch_size) {
                let mut grads: Option<GradMap> = None;
                let mut batch_loss = 0.0;
                let w = 1.0 / batch.len() as f64;
                for &i in batch {
                    let s = &self.data.s1[i];
                    let mut g = Graph::new();
                    let p = self.model.params.bind(&mut g);
                    let (l, _) = loss_node(&mut g, &p, &s.zero_filled, &s.truth, &s.normal, &recon)?;
                    let v = g.value(l).item();
                    if !v.is_finite() {
                        return Err(FedError::NonFiniteLoss { round, client: self.id });
                    }
                    batch_loss += w * v;
                    let mut gr = g.backward_scaled(l, w).map_err(ReconError::from)?;
                    accumulate(&mut grads, p.gradients(&mut gr))?;
                }
                if consistency {
                    let n2 = server_outputs.len();
                    let take = config.batch_size.min(n2);
                    let wc = self.gamma / take as f64;
                    for _ in 0..take {
                        let j = s2_cursor % n2;
                        s2_cursor += 1;
                        let s = &self.data.s2[j];
                        let mut g = Graph::new();
                        let p = self.model.params.bind(&mut g);
                        let (_, out) = loss_node(&mut g, &p, &s.zero_filled, &s.truth, &s.normal, &recon)?;
                        let target = g.constant(server_outputs[j].clone());
                        let d = g.sub(out, target)?;
                        let l = g.norm(d);
                        let mut gr = g.backward_scaled(l, wc).map_err(ReconError::from)?;
                        accumulate(&mut grads, p.gradients(&mut gr))?;
                    }
                }
                let mut grads = grads.expect("non-empty batch");
                if let Some(anchor) = &prox {
                    for (name, grad) in grads.iter_mut() {
                        let theta = self.model.params.tensor(name).expect("bound parameter");
                        let diff = theta.sub(anchor.tensor(name).expect("compatible sets"))?;
                        grad.axpy(config.mu, &diff)?;
                    }
                }
                self.optimizer.step(&mut self.model.params, &grads)?;
                loss_sum += batch_loss;
                batches += 1;
            }
        }
        Ok(loss_sum / batches as f64)
    }
}

/// Overwrite the client's shared tensors with the server's and stash a
/// frozen copy of the full server model.
pub fn client_receive(client: &mut ClientState, server: &ParamSet) -> Result<(), FedError> {
    if !client.model.params.is_compatible(server) {
        return Err(FedError::Protocol(format!(
            "client {} parameter names or shapes differ from the server's",
            client.id
        )));
    }
    for p in client.model.params.iter_mut() {
        if p.tag() == PartitionTag::GlobalShared {
            p.tensor = server.tensor(&p.name).expect("compatible sets").clone();
        }
    }
    client.server_copy = Some(server.clone());
    Ok(())
}

/// `L_C^k`: mean subset-2 loss of the frozen server model.
pub fn eval_server_loss(client: &ClientState) -> Result<f64, FedError> {
    let server = client.stash()?;
    Ok(client.evaluate_s2(server, None)?.loss)
}

/// `L_s2^k`: mean subset-2 loss of `Θ_Cg ∪ Θ_Cl^k`.
pub fn eval_mixed_loss(client: &ClientState) -> Result<f64, FedError> {
    Ok(client.eval_mixed(None)?.loss)
}
