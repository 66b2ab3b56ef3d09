//! Dense `f64` tensors with a tape-based reverse-mode differentiator.
//!
//! The op set is deliberately small: what the message-passing encoders, the
//! opinion-dynamics block and the losses need. Everything is a matrix in
//! row-major order; the only broadcasts are row tiling (bias, per-column
//! parameters, per-group masks) and one-element scalars.

mod activation;
mod gradcheck;
mod tape;
mod tensor;

pub use activation::{inverse_softplus, sigmoid, softplus, Activation};
pub use gradcheck::{grad_check, grad_check_many, grad_check_many_extrapolated, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs {expected} elements, found {found}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("node {node} is not on this tape ({len} nodes)")]
    UnknownNode { node: usize, len: usize },
    #[error("index {index} out of range {bound} in {op}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op} of an empty tensor")]
    Empty { op: &'static str },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("objective returned non-finite value {value} during gradient check")]
    NonFiniteObjective { value: f64 },
}
