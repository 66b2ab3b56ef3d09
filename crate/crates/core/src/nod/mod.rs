//! Nonlinear opinion dynamics: right-hand sides, stepping, equilibrium
//! continuation and mutual-exclusivity analysis.

mod dynamics;
mod equilibria;
mod exclusivity;

pub use dynamics::*;
pub use equilibria::*;
pub use exclusivity::*;

#[derive(Debug, thiserror::Error)]
pub enum NodError {
    #[error("{what} has shape {found:?}, expected {expected:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("state became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("reduction needs a^o_12, a^o_21 <= 0, got ({a12}, {a21})")]
    SignPrecondition { a12: f64, a21: f64 },
    #[error("no convergence: {context}")]
    NoConvergence { context: String },
    #[error("category {category} has zero variance over the trace")]
    DegenerateTrace { category: usize },
    #[error("trace has {frames} frames, need at least 2")]
    TooShort { frames: usize },
    #[error("sweep csv line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
