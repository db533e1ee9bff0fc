//! Minimal reverse-mode automatic differentiation engine.
//!
//! A [`Tape`] records a forward computation over dense [`Tensor`] values
//! (at most three axes, laid out time x batch x feature) and replays it
//! backwards to accumulate exact gradients. Only the operations needed by
//! small recurrent sequence models are provided; there is no GPU path, no
//! graph optimization, and all arithmetic is in `f64`.

mod check;
mod tape;
mod tensor;

pub use check::{central_diff, max_rel_err};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised while building or differentiating a tape.
#[derive(Debug, Error)]
pub enum NdiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: index {index} out of bounds for axis of length {len}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward requires a scalar root, got shape {got:?}")]
    NonScalarRoot { got: Vec<usize> },
    #[error("backward called twice on the same tape without reset")]
    BackwardTwice,
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, NdiffError>;
