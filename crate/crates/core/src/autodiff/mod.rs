//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records one forward computation. Parameters live in a
//! [`ParamStore`] and are borrowed by the tape, so many tapes (one per
//! sentence) can read the same parameters while each produces its own
//! [`Gradients`]. Gradients are summed by the caller, written back with
//! [`ParamStore::accumulate`] and consumed by [`sgd_step`].

mod optim;
mod store;
mod tape;
mod tensor;

pub use optim::{clip_grad_norm, sgd_step};
pub use store::{ParamId, ParamStore};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("learning rate must be finite and non-negative, got {0}")]
    BadLearningRate(f64),
}
