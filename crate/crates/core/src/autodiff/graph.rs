//! Tape-based reverse-mode differentiation.
//!
//! Every op appends one node; node indices are therefore already a
//! topological order, and `backward` walks the tape once in reverse.

use std::sync::Arc;

use super::conv::{self, ConvGeometry};
use super::{GraphError, ShapeError, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// A fixed real-linear map with a known adjoint, recorded as a single node.
pub trait LinearOp: Send + Sync {
    fn apply(&self, x: &Tensor) -> Tensor;
    fn adjoint(&self, y: &Tensor) -> Tensor;
}

enum Op {
    Input,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy { x: Var, s: Var },
    AddChannelBias { x: Var, bias: Var },
    BroadcastMul { x: Var, gate: Var },
    Conv2d { x: Var, kernel: Var, geom: ConvGeometry },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    ChannelPool { x: Var, mode: PoolMode, argmax: Vec<usize> },
    GlobalPool { x: Var, mode: PoolMode, argmax: Vec<usize> },
    Concat(Vec<Var>),
    Sum(Var),
    Dot(Var, Var),
    Div(Var, Var),
    Norm(Var),
    Linear { x: Var, op: Arc<dyn LinearOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Confined to a single thread of work.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` is not on any path.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

/// Inverse of softplus for positive `y`.
pub fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y − 1), rearranged to stay finite for large y
    y + (-(-y).exp_m1()).ln()
}

fn pool_channels(x: &Tensor, mode: PoolMode) -> Result<(Tensor, Vec<usize>), ShapeError> {
    let (c, h, w) = x.chw()?;
    if c == 0 {
        return Err(ShapeError::Empty);
    }
    let hw = h * w;
    let d = x.data();
    let mut out = vec![0.0; hw];
    let mut argmax = Vec::new();
    match mode {
        PoolMode::Avg => {
            for ch in 0..c {
                for (o, v) in out.iter_mut().zip(&d[ch * hw..(ch + 1) * hw]) {
                    *o += v;
                }
            }
            let inv = 1.0 / c as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        PoolMode::Max => {
            argmax = vec![0; hw];
            out.copy_from_slice(&d[..hw]);
            for ch in 1..c {
                for p in 0..hw {
                    let v = d[ch * hw + p];
                    if v > out[p] {
                        out[p] = v;
                        argmax[p] = ch;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&[1, h, w], out)?, argmax))
}

fn pool_global(x: &Tensor, mode: PoolMode) -> Result<(Tensor, Vec<usize>), ShapeError> {
    let (c, h, w) = x.chw()?;
    let hw = h * w;
    if hw == 0 {
        return Err(ShapeError::Empty);
    }
    let d = x.data();
    let mut out = vec![0.0; c];
    let mut argmax = Vec::new();
    match mode {
        PoolMode::Avg => {
            for ch in 0..c {
                out[ch] = d[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
            }
        }
        PoolMode::Max => {
            argmax = vec![0; c];
            for ch in 0..c {
                let plane = &d[ch * hw..(ch + 1) * hw];
                let mut best = 0;
                for (p, &v) in plane.iter().enumerate() {
                    if v > plane[best] {
                        best = p;
                    }
                }
                out[ch] = plane[best];
                argmax[ch] = best;
            }
        }
    }
    Ok((Tensor::new(&[c, 1, 1], out)?, argmax))
}

/// Per-pixel mean or max over the channel axis: `C×H×W → 1×H×W`.
pub fn channel_pool(x: &Tensor, mode: PoolMode) -> Result<Tensor, ShapeError> {
    pool_channels(x, mode).map(|(t, _)| t)
}

/// Per-channel spatial mean or max: `C×H×W → C×1×1`.
pub fn global_pool(x: &Tensor, mode: PoolMode) -> Result<Tensor, ShapeError> {
    pool_global(x, mode).map(|(t, _)| t)
}

enum Broadcast {
    Same,
    Channel,
    Spatial,
}

fn broadcast_kind(x: &[usize], gate: &[usize]) -> Result<Broadcast, ShapeError> {
    let mismatch = || ShapeError::Mismatch {
        left: x.to_vec(),
        right: gate.to_vec(),
    };
    match (x, gate) {
        _ if x == gate => Ok(Broadcast::Same),
        (&[c, _, _], &[gc, 1, 1]) if gc == c => Ok(Broadcast::Channel),
        (&[_, h, w], &[1, gh, gw]) if gh == h && gw == w => Ok(Broadcast::Spatial),
        _ => Err(mismatch()),
    }
}

fn broadcast_mul(x: &Tensor, gate: &Tensor, kind: &Broadcast) -> Tensor {
    match kind {
        Broadcast::Same => x.mul(gate).expect("same shape"),
        Broadcast::Channel => {
            let (c, h, w) = x.chw().expect("chw");
            let hw = h * w;
            let mut out = x.data().to_vec();
            for ch in 0..c {
                let g = gate.data()[ch];
                out[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v *= g);
            }
            Tensor::new(x.shape(), out).expect("shape")
        }
        Broadcast::Spatial => {
            let (c, h, w) = x.chw().expect("chw");
            let hw = h * w;
            let mut out = x.data().to_vec();
            let g = gate.data();
            for ch in 0..c {
                for (v, gv) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(g) {
                    *v *= gv;
                }
            }
            Tensor::new(x.shape(), out).expect("shape")
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked (a trainable parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    /// Multiply a tensor by a one-element node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, ShapeError> {
        let sv = self.scalar_value(s)?;
        let v = self.value(x).scale(sv);
        Ok(self.push(v, Op::ScaleBy { x, s }, &[x, s]))
    }

    /// Add a per-channel bias of length `C` to a `C×H×W` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var, ShapeError> {
        let (c, h, w) = self.value(x).chw()?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(ShapeError::Mismatch {
                left: self.value(x).shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut out = self.value(x).data().to_vec();
        for ch in 0..c {
            let bv = b.data()[ch];
            out[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v += bv);
        }
        let v = Tensor::new(&[c, h, w], out)?;
        Ok(self.push(v, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    /// Elementwise product with a gate of shape `C×1×1`, `1×H×W`, or `C×H×W`.
    pub fn broadcast_mul(&mut self, x: Var, gate: Var) -> Result<Var, ShapeError> {
        let kind = broadcast_kind(self.value(x).shape(), self.value(gate).shape())?;
        let v = broadcast_mul(self.value(x), self.value(gate), &kind);
        Ok(self.push(v, Op::BroadcastMul { x, gate }, &[x, gate]))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var, ShapeError> {
        let geom = ConvGeometry::new(self.value(x), self.value(kernel), dilation)?;
        let v = conv::forward(self.value(x), self.value(kernel), &geom);
        Ok(self.push(v, Op::Conv2d { x, kernel, geom }, &[x, kernel]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = relu(self.value(x));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = sigmoid(self.value(x));
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.push(v, Op::Softplus(x), &[x])
    }

    pub fn channel_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var, ShapeError> {
        let (v, argmax) = pool_channels(self.value(x), mode)?;
        Ok(self.push(v, Op::ChannelPool { x, mode, argmax }, &[x]))
    }

    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var, ShapeError> {
        let (v, argmax) = pool_global(self.value(x), mode)?;
        Ok(self.push(v, Op::GlobalPool { x, mode, argmax }, &[x]))
    }

    /// Concatenate `C_i×H×W` tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let first = parts.first().ok_or(ShapeError::Empty)?;
        let (_, h, w) = self.value(*first).chw()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return Err(ShapeError::Mismatch {
                    left: self.value(*first).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            c_total += c;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(&[c_total, h, w], data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let v = Tensor::scalar(self.value(a).dot(self.value(b))?);
        Ok(self.push(v, Op::Dot(a, b), &[a, b]))
    }

    /// Quotient of two one-element nodes.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let v = Tensor::scalar(self.scalar_value(a)? / self.scalar_value(b)?);
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    /// Euclidean norm of all entries; the gradient at the origin is taken as zero.
    pub fn norm(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).norm());
        self.push(v, Op::Norm(x), &[x])
    }

    pub fn linear(&mut self, x: Var, op: Arc<dyn LinearOp>) -> Var {
        let v = op.apply(self.value(x));
        self.push(v, Op::Linear { x, op }, &[x])
    }

    fn scalar_value(&self, s: Var) -> Result<f64, ShapeError> {
        let t = self.value(s);
        if !t.is_scalar() {
            return Err(ShapeError::NotScalar {
                shape: t.shape().to_vec(),
            });
        }
        Ok(t.item())
    }

    /// Reverse-mode gradients of a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GraphError> {
        self.backward_scaled(loss, 1.0)
    }

    /// As [`Graph::backward`] with the output seed set to `seed`.
    pub fn backward_scaled(&self, loss: Var, seed: f64) -> Result<Gradients, GraphError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(GraphError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape(), vec![seed]).expect("scalar"));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let tracked = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Input => {}
            Op::Add(a, b) => {
                if tracked(a) {
                    accumulate(grads, *a, g.clone());
                }
                if tracked(b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if tracked(a) {
                    accumulate(grads, *a, g.clone());
                }
                if tracked(b) {
                    accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if tracked(a) {
                    accumulate(grads, *a, g.mul(self.value(*b)).expect("shape"));
                }
                if tracked(b) {
                    accumulate(grads, *b, g.mul(self.value(*a)).expect("shape"));
                }
            }
            Op::Scale(x, s) => {
                if tracked(x) {
                    accumulate(grads, *x, g.scale(*s));
                }
            }
            Op::ScaleBy { x, s } => {
                if tracked(x) {
                    accumulate(grads, *x, g.scale(self.value(*s).item()));
                }
                if tracked(s) {
                    let ds = g.dot(self.value(*x)).expect("shape");
                    accumulate(grads, *s, Tensor::new(self.value(*s).shape(), vec![ds]).expect("scalar"));
                }
            }
            Op::AddChannelBias { x, bias } => {
                if tracked(x) {
                    accumulate(grads, *x, g.clone());
                }
                if tracked(bias) {
                    let db = pool_global(g, PoolMode::Avg).expect("chw").0;
                    let (_, h, w) = g.chw().expect("chw");
                    let db = db.scale((h * w) as f64);
                    let db = db.reshape(self.value(*bias).shape()).expect("bias shape");
                    accumulate(grads, *bias, db);
                }
            }
            Op::BroadcastMul { x, gate } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                let kind = broadcast_kind(xv.shape(), gv.shape()).expect("recorded shape");
                if tracked(x) {
                    accumulate(grads, *x, broadcast_mul(g, gv, &kind));
                }
                if tracked(gate) {
                    let prod = g.mul(xv).expect("shape");
                    let dg = match kind {
                        Broadcast::Same => prod,
                        Broadcast::Channel => {
                            let (_, h, w) = prod.chw().expect("chw");
                            pool_global(&prod, PoolMode::Avg).expect("chw").0.scale((h * w) as f64)
                        }
                        Broadcast::Spatial => {
                            let (c, _, _) = prod.chw().expect("chw");
                            pool_channels(&prod, PoolMode::Avg).expect("chw").0.scale(c as f64)
                        }
                    };
                    accumulate(grads, *gate, dg);
                }
            }
            Op::Conv2d { x, kernel, geom } => {
                if tracked(x) {
                    accumulate(grads, *x, conv::backward_input(g, self.value(*kernel), geom));
                }
                if tracked(kernel) {
                    accumulate(grads, *kernel, conv::backward_kernel(g, self.value(*x), geom));
                }
            }
            Op::Relu(x) => {
                if tracked(x) {
                    let d = g
                        .zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                        .expect("shape");
                    accumulate(grads, *x, d);
                }
            }
            Op::Sigmoid(x) => {
                if tracked(x) {
                    let d = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s)).expect("shape");
                    accumulate(grads, *x, d);
                }
            }
            Op::Softplus(x) => {
                if tracked(x) {
                    let d = g
                        .zip_map(self.value(*x), |gv, xv| gv * sigmoid_scalar(xv))
                        .expect("shape");
                    accumulate(grads, *x, d);
                }
            }
            Op::ChannelPool { x, mode, argmax } => {
                if tracked(x) {
                    let xv = self.value(*x);
                    let (c, h, w) = xv.chw().expect("chw");
                    let hw = h * w;
                    let mut d = vec![0.0; c * hw];
                    match mode {
                        PoolMode::Avg => {
                            let inv = 1.0 / c as f64;
                            for ch in 0..c {
                                for p in 0..hw {
                                    d[ch * hw + p] = g.data()[p] * inv;
                                }
                            }
                        }
                        PoolMode::Max => {
                            for p in 0..hw {
                                d[argmax[p] * hw + p] = g.data()[p];
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(xv.shape(), d).expect("shape"));
                }
            }
            Op::GlobalPool { x, mode, argmax } => {
                if tracked(x) {
                    let xv = self.value(*x);
                    let (c, h, w) = xv.chw().expect("chw");
                    let hw = h * w;
                    let mut d = vec![0.0; c * hw];
                    match mode {
                        PoolMode::Avg => {
                            let inv = 1.0 / hw as f64;
                            for ch in 0..c {
                                let gv = g.data()[ch] * inv;
                                d[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = gv);
                            }
                        }
                        PoolMode::Max => {
                            for ch in 0..c {
                                d[ch * hw + argmax[ch]] = g.data()[ch];
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(xv.shape(), d).expect("shape"));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape();
                    let len = self.value(*p).len();
                    if tracked(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        accumulate(grads, *p, Tensor::new(shape, d).expect("shape"));
                    }
                    offset += len;
                }
            }
            Op::Sum(x) => {
                if tracked(x) {
                    accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g.item()));
                }
            }
            Op::Dot(a, b) => {
                let s = g.item();
                if tracked(a) {
                    accumulate(grads, *a, self.value(*b).scale(s));
                }
                if tracked(b) {
                    accumulate(grads, *b, self.value(*a).scale(s));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).item(), self.value(*b).item());
                if tracked(a) {
                    accumulate(grads, *a, Tensor::new(self.value(*a).shape(), vec![g.item() / bv]).expect("scalar"));
                }
                if tracked(b) {
                    let db = -g.item() * av / (bv * bv);
                    accumulate(grads, *b, Tensor::new(self.value(*b).shape(), vec![db]).expect("scalar"));
                }
            }
            Op::Norm(x) => {
                if tracked(x) {
                    let n = node.value.item();
                    let d = if n > 0.0 {
                        self.value(*x).scale(g.item() / n)
                    } else {
                        Tensor::zeros(self.value(*x).shape())
                    };
                    accumulate(grads, *x, d);
                }
            }
            Op::Linear { x, op } => {
                if tracked(x) {
                    accumulate(grads, *x, op.adjoint(g));
                }
            }
        }
    }
}
