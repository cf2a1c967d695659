//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Operations are recorded on a [`Graph`] as they execute. A reverse sweep in
//! creation order ([`Graph::backward`]) then yields gradients for every
//! differentiable leaf. Only the operations the model needs are provided:
//! matrix products, 1-D convolution, pooling, batch normalization, a GRU step
//! and a handful of element-wise maps and reductions.

mod adam;
pub mod check;
mod graph;
mod linalg;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{
    BatchStats, Gradients, Graph, Var, BATCHNORM_EPS, BATCHNORM_MOMENTUM, LEAKY_SLOPE,
};
pub use graph::{log_sigmoid, sigmoid};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("gradient for unknown parameter `{0}`")]
    UnknownParameter(String),
}
