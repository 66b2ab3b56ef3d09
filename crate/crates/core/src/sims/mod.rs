//! Simulated multi-agent systems, trajectory datasets and their on-disk format.

mod dataset;
mod import;
mod systems;

pub use dataset::*;
pub use import::*;
pub use systems::*;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("singular mass matrix (det = {0:e})")]
    Singular(f64),
    #[error("coarsening factor {factor} does not divide {len} frames")]
    Coarsen { factor: usize, len: usize },
    #[error("dataset format version {found} is not supported (expected {expected})")]
    FormatVersion { expected: u32, found: u32 },
    #[error("data blob has {found} bytes, expected {expected}")]
    Truncated { expected: usize, found: usize },
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("inconsistent trajectories: {0}")]
    Ragged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
