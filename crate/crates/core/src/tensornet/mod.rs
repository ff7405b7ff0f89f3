//! Minimal dense-array computation kernel with reverse-mode differentiation,
//! losses, and optimizers for the three classifier families.

mod graph;
mod kernels;
mod loss;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use loss::softmax_cross_entropy;
pub use optim::{adam_step, sgd_step, OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{Checkpoint, Param, ParamRole, ParamSpec, ParameterSet};
pub use tensor::Tensor;

/// Errors surfaced by tensor construction, kernel ops, and the graph.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("graph cycle: node {0} references a later node")]
    GraphCycle(usize),
    #[error("duplicate parameter name: {0}")]
    DuplicateParam(String),
    #[error("unknown parameter name: {0}")]
    UnknownParam(String),
    #[error("checkpoint malformed: {0}")]
    BadCheckpoint(String),
}

pub(crate) fn shape_err(op: &'static str, details: String) -> TensorError {
    TensorError::ShapeMismatch { op, details }
}
