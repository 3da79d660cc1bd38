//! Dense `f64` tensors, reverse-mode differentiation and AdamW.

mod conv;
mod graph;
mod optim;
mod param;
mod tensor;

use thiserror::Error;

pub use conv::conv2d;
pub use graph::{
    channel_pool, global_pool, inverse_softplus, relu, sigmoid, softplus, Gradients, Graph, LinearOp,
    PoolMode, Var,
};
pub use optim::{AdamW, AdamWConfig, OptimState};
pub use param::{BoundParams, GradMap, ParamSet, Parameter, PartitionTag};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShapeError {
    #[error("shape {shape:?} holds {} values, got {len}", shape.iter().product::<usize>())]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    Mismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("input has {input} channels but kernel expects {kernel}")]
    Channels { input: usize, kernel: usize },
    #[error("kernel must be square with odd size, got {shape:?}")]
    Kernel { shape: Vec<usize> },
    #[error("dilation must be at least 1")]
    Dilation,
    #[error("expected a one-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("empty input")]
    Empty,
    #[error("parameter {name} missing")]
    Missing { name: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("no gradient supplied for parameter {name}")]
    MissingGradient { name: String },
    #[error("gradient for {name} has shape {grad:?}, parameter has {param:?}")]
    Shape {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("non-finite gradient in parameter {name} at index {index}")]
    NonFiniteGradient { name: String, index: usize },
}
