//! Dense tensors and a reverse-mode differentiation tape.
//!
//! The tape is rebuilt for every forward pass. Gradients can be pulled
//! either from a scalar output ([`Tape::grad`]) or as a vector–Jacobian
//! product against an arbitrary adjoint seed ([`Tape::seeded_grad`]); the
//! physics residual relies on the latter to differentiate forecasts with
//! respect to embedding inputs.

mod check;
mod tape;
mod tensor;

pub use check::check_gradients;
pub use tape::{Gradients, Tape, Unary, Var};
pub(crate) use tape::huber_scalar;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("gradient requested of a non-scalar output with {len} elements")]
    NonScalarOutput { len: usize },
    #[error("input {position} is not a gradient-requiring value on this tape")]
    DetachedInput { position: usize },
    #[error("{op}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite value encountered ({context})")]
    NonFiniteValue { context: String },
}
