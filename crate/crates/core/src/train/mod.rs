//! Losses, optimizer, schedule and the training loop.

mod fit;
mod loss;
mod optim;

pub use fit::*;
pub use loss::*;
pub use optim::*;

use serde::{Deserialize, Serialize};

use crate::diffcore::Activation;
use crate::model::{CommVariant, ModelError};
use crate::sims::SystemKind;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset does not fit: {0}")]
    Data(String),
    #[error("optimizer state has {expected} buffers of the given sizes, got {found}")]
    OptimizerShape { expected: usize, found: usize },
    #[error("epoch {epoch}: every batch produced a non-finite loss ({detail})")]
    NonFinite { epoch: usize, detail: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLr {
    pub step: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Step decay; constant rate when absent.
    pub scheduler: Option<StepLr>,
    pub activation: Activation,
    pub hidden: usize,
    pub n_options: usize,
    /// Weight of the reconstruction loss.
    pub gamma1: f64,
    /// Weight of the latent-dynamics loss.
    pub gamma2: f64,
    pub seed: u64,
    pub comm: CommVariant,
    pub eps: f64,
    /// Feed ground-truth environmental input and communication to training
    /// unrolls instead of re-encoding predictions.
    pub env_from_truth: bool,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    /// Trajectories per independent tape within a batch.
    pub shard_size: usize,
    pub train_data: Option<String>,
    pub val_data: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            scheduler: Some(StepLr { step: 200, gamma: 0.25 }),
            activation: Activation::Tanh,
            hidden: 128,
            n_options: 2,
            gamma1: 1.0,
            gamma2: 1.0,
            seed: 0,
            comm: CommVariant::SquaredDistance,
            eps: 1e-6,
            env_from_truth: false,
            grad_clip: None,
            shard_size: 32,
            train_data: None,
            val_data: None,
        }
    }
}

impl TrainConfig {
    /// Per-system hyperparameters (full-scale epochs).
    pub fn for_system(kind: SystemKind) -> Self {
        let base = Self::default();
        match kind {
            SystemKind::Pendulum => Self {
                epochs: 500,
                activation: Activation::Relu,
                hidden: 64,
                n_options: 2,
                scheduler: None,
                ..base
            },
            SystemKind::DoublePendulum => Self {
                epochs: 500,
                activation: Activation::Elu,
                hidden: 64,
                n_options: 2,
                scheduler: None,
                ..base
            },
            SystemKind::MassSpring => Self {
                epochs: 1000,
                n_options: 4,
                ..base
            },
            SystemKind::Kuramoto => Self {
                epochs: 1000,
                n_options: 2,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.shard_size == 0 || self.hidden == 0 || self.n_options == 0 {
            return bad("epochs, batch size, shard size, hidden width and options must be positive".into());
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be finite and nonnegative, got {}", self.lr));
        }
        if let Some(s) = self.scheduler {
            if s.step == 0 || !(s.gamma > 0.0 && s.gamma <= 1.0) {
                return bad(format!("scheduler needs step > 0 and 0 < gamma <= 1, got {s:?}"));
            }
        }
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0) {
            return bad("loss weights must be nonnegative".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("gradient clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}
