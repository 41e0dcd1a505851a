//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`]: every primitive records the inputs it consumed
//! so [`Tape::backward`] can traverse the record once, in reverse, and
//! accumulate gradients into every `requires_grad` leaf. Tensors are flat
//! row-major `f64` buffers; a tape is single-threaded and cheap to create,
//! one per forward/backward pass.

mod kernels;
mod tape;

pub use kernels::{mm_nn_acc, mm_nt_acc, mm_tn_acc, softmax_slice};
pub use tape::{Tape, TensorId};

use thiserror::Error;

/// Errors raised by tensor primitives when a contract is violated.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
