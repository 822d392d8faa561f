//! Minimal reverse-mode differentiable computation substrate.
//!
//! Supplies exactly the operations the noise predictor and its losses need,
//! plus finite-difference gradient verification. 64-bit reals throughout.

mod graph;
mod kernels;
mod tensor;

pub use graph::{Graph, NodeId, Op, GROUP_NORM_EPS};
pub use tensor::Tensor;

/// Errors from graph construction and differentiation.
#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("node {0} does not exist in this graph")]
    UnknownNode(usize),
    #[error("loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("softmax axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("group-norm with {groups} groups does not divide shape {shape:?}")]
    InvalidGroups { groups: usize, shape: Vec<usize> },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("node {0} is not a parameter")]
    NotAParameter(usize),
}
