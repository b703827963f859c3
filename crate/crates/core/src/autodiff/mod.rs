//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Operations are recorded eagerly on a [`Tape`]; [`Tape::backward`] sweeps
//! the recorded nodes in reverse and returns [`Gradients`] for every value
//! that requires one. The engine is generic over [`Element`] so the same
//! model code runs in `f32` for training and in `f64` for gradient checks.

pub mod check;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};

/// LayerNorm epsilon used throughout the models.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward called on a value that is not attached to the gradient tape")]
    Detached,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
