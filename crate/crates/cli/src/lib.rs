//! Command-line driver: dataset generation and import, training,
//! evaluation, rollouts, and analysis of the learned opinion dynamics.

pub mod analysis;
pub mod args;
pub mod commands;
pub mod manifest;
pub mod svg;

use std::ffi::OsString;

use binn_core::model::ModelError;
use binn_core::nod::NodError;
use binn_core::sims::SimError;
use binn_core::train::TrainError;
use clap::Parser;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_FAILED: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, configuration or incompatible inputs.
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Invalid(_) => EXIT_INVALID,
            Self::Failed(_) => EXIT_FAILED,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::Coarsen { .. } | SimError::Ragged(_) | SimError::Csv { .. } => Self::Invalid(e.to_string()),
            _ => Self::Failed(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::Shape { .. } | ModelError::Checkpoint(_) => Self::Invalid(e.to_string()),
            _ => Self::Failed(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Config(_) | TrainError::Data(_) => Self::Invalid(e.to_string()),
            _ => Self::Failed(e.to_string()),
        }
    }
}

impl From<NodError> for CliError {
    fn from(e: NodError) -> Self {
        match e {
            NodError::Shape { .. } | NodError::InvalidParam(_) | NodError::SignPrecondition { .. } | NodError::TooShort { .. } => {
                Self::Invalid(e.to_string())
            }
            _ => Self::Failed(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Failed(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Failed(e.to_string())
    }
}

/// Caps the global worker pool at `BINN_THREADS` when set. Later calls are no-ops.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("BINN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Invalid(format!("BINN_THREADS must be a positive integer, got '{raw}'")))?;
    // a pool that is already built keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
