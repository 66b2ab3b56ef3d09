//! The behavior-inspired network: message-passing encoders for preferences
//! and environmental input, a learned opinion-dynamics block, and a decoder.

mod binn;
mod checkpoint;

pub use binn::*;
pub use checkpoint::*;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, DiffError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input shape {found:?} does not fit the model ({expected})")]
    Shape { expected: String, found: Vec<usize> },
    #[error("rollout diverged at step {step}: {source}")]
    Diverged { step: usize, source: DiffError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How the communication matrix is formed from agent positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommVariant {
    /// `‖p_i − p_k‖²`.
    #[serde(alias = "sqdist")]
    SquaredDistance,
    /// `1 / (‖p_i − p_k‖² + ε)`.
    #[serde(alias = "invdist")]
    InverseDistance,
    /// Inverse distance scaled elementwise by a learned matrix.
    #[serde(alias = "learned")]
    LearnedMultiplier,
}

impl CommVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::SquaredDistance => "sqdist",
            Self::InverseDistance => "invdist",
            Self::LearnedMultiplier => "learned",
        }
    }
}

impl fmt::Display for CommVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CommVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sqdist" | "squared_distance" => Ok(Self::SquaredDistance),
            "invdist" | "inverse_distance" => Ok(Self::InverseDistance),
            "learned" | "learned_multiplier" => Ok(Self::LearnedMultiplier),
            _ => Err(ModelError::Config(format!("unknown comm variant '{s}' (sqdist, invdist, learned)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_agents: usize,
    pub state_dim: usize,
    /// Latent categories per agent.
    pub n_options: usize,
    pub hidden: usize,
    /// Activation inside the MLPs. The opinion-dynamics saturation is always tanh.
    pub activation: Activation,
    pub comm: CommVariant,
    pub eps: f64,
    /// Latent Euler step, equal to the dataset frame spacing.
    pub dt: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_agents == 0 || self.n_options == 0 || self.hidden == 0 {
            return bad("agents, options and hidden width must be positive".into());
        }
        if self.state_dim == 0 || self.state_dim % 2 != 0 {
            return bad(format!("state_dim must be even and positive, got {}", self.state_dim));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.comm != CommVariant::SquaredDistance && !(self.eps > 0.0) {
            return bad(format!("eps must be positive for {}, got {}", self.comm, self.eps));
        }
        Ok(())
    }
}
