//! Dense tensors, a static computation graph with reverse-mode
//! differentiation, and the Adam optimizer.

mod adam;
mod graph;
pub mod kernels;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{apply_mask, Forward, Graph, Init, Mode, NodeId, Op, ParamSet, ParamSpec};
pub use kernels::{ConvMask, MaskKind, Padding};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    ShapeMismatch { node: usize, op: &'static str, detail: String },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("graph input `{0}` is not bound")]
    UnboundInput(String),
    #[error("graph has no input named `{0}`")]
    UnknownInput(String),
    #[error("backward needs a scalar output; node {node} has shape {shape:?}")]
    NotScalar { node: usize, shape: Vec<usize> },
    #[error("gradient requested through sampling node {node}")]
    NonDifferentiable { node: usize },
    #[error("kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("unknown mask kind `{0}`")]
    UnknownMask(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("node {0} was not evaluated")]
    NotEvaluated(usize),
}
