use std::io;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{batch_loss, clip_grad_norm, scheduler_lr, Adam, LossBreakdown, TrainConfig, TrainError};
use crate::diffcore::{Tape, Tensor};
use crate::model::{BinnModel, ModelConfig, ModelError, RolloutStart};
use crate::sims::{trajectory_rng, TrajectoryDataset};

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_pred: f64,
    pub train_recon: f64,
    pub train_latent: f64,
    pub train_total: f64,
    /// Rollout MSE on the validation set (mean over all state elements).
    pub val_pred: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Weights after the last epoch.
    pub last: BinnModel,
    /// Weights with the lowest validation rollout MSE.
    pub best: BinnModel,
    pub best_epoch: usize,
    pub best_val: f64,
    pub log: Vec<EpochMetrics>,
    /// Batches whose loss was non-finite and therefore skipped.
    pub skipped_batches: usize,
}

pub fn model_config(cfg: &TrainConfig, ds: &TrajectoryDataset) -> ModelConfig {
    ModelConfig {
        n_agents: ds.n_agents,
        state_dim: ds.state_dim,
        n_options: cfg.n_options,
        hidden: cfg.hidden,
        activation: cfg.activation,
        comm: cfg.comm,
        eps: cfg.eps,
        dt: ds.dt,
    }
}

fn check_data(model: &ModelConfig, ds: &TrajectoryDataset, what: &str) -> Result<(), TrainError> {
    if ds.n_agents != model.n_agents || ds.state_dim != model.state_dim {
        return Err(TrainError::Data(format!(
            "{what} set has {} agents × {} dims, model expects {} × {}",
            ds.n_agents, ds.state_dim, model.n_agents, model.state_dim
        )));
    }
    if (ds.dt - model.dt).abs() > 1e-12 * model.dt.abs() {
        return Err(TrainError::Data(format!("{what} set has dt {}, model uses {}", ds.dt, model.dt)));
    }
    if ds.frames < 2 {
        return Err(TrainError::Data(format!("{what} set has {} frames, need at least 2", ds.frames)));
    }
    Ok(())
}

/// Trains from a fresh model seeded by `cfg.seed`.
pub fn fit(train: &TrajectoryDataset, val: &TrajectoryDataset, cfg: &TrainConfig) -> Result<FitResult, TrainError> {
    fit_with(train, val, cfg, None, |_| {})
}

/// Trains `init` (or a fresh model when absent), reporting each epoch.
///
/// Each epoch shuffles the training set with a seeded stream, takes one
/// Adam step per mini-batch, and then scores the validation set. A batch
/// whose forward pass turns non-finite is skipped with a warning; an epoch
/// in which every batch is skipped is an error.
pub fn fit_with(
    train: &TrajectoryDataset,
    val: &TrajectoryDataset,
    cfg: &TrainConfig,
    init: Option<BinnModel>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Data("training and validation sets must be nonempty".into()));
    }
    let mut model = match init {
        Some(m) => m,
        None => BinnModel::new(model_config(cfg, train), cfg.seed)?,
    };
    check_data(&model.config, train, "training")?;
    check_data(&model.config, val, "validation")?;

    let mut adam = Adam::new(&model.params);
    let mut rng = trajectory_rng(cfg.seed, u64::MAX);
    let mut order: Vec<usize> = (0..train.n_traj()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), 0, f64::INFINITY);
    let mut skipped = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.scheduler.map_or(cfg.lr, |s| scheduler_lr(cfg.lr, epoch, s.step, s.gamma));
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut seen = 0usize;
        let mut last_err = None;
        for batch in order.chunks(cfg.batch_size) {
            match batch_loss(&model, train, batch, cfg, true) {
                Ok((l, Some(mut g))) => {
                    if let Some(c) = cfg.grad_clip {
                        clip_grad_norm(&mut g, c);
                    }
                    adam.step(&mut model.params, &g, lr)?;
                    let w = batch.len() as f64;
                    sums.pred += l.pred * w;
                    sums.recon += l.recon * w;
                    sums.latent += l.latent * w;
                    seen += batch.len();
                }
                Ok((_, None)) => unreachable!("gradients requested"),
                Err(TrainError::Model(ModelError::Diff(e))) | Err(TrainError::Model(ModelError::Diverged { source: e, .. })) => {
                    log::warn!("epoch {epoch}: skipped batch: {e}");
                    skipped += 1;
                    last_err = Some(e.to_string());
                }
                Err(e) => return Err(e),
            }
        }
        if seen == 0 {
            return Err(TrainError::NonFinite {
                epoch,
                detail: last_err.unwrap_or_default(),
            });
        }
        let n = seen as f64;
        let train_loss = LossBreakdown::combine(sums.pred / n, sums.recon / n, sums.latent / n, cfg.gamma1, cfg.gamma2);
        let val_pred = evaluate_mse(val, &model).unwrap_or(f64::INFINITY);
        let m = EpochMetrics {
            epoch,
            lr,
            train_pred: train_loss.pred,
            train_recon: train_loss.recon,
            train_latent: train_loss.latent,
            train_total: train_loss.total,
            val_pred,
        };
        if val_pred < best.2 {
            best = (model.clone(), epoch, val_pred);
        }
        on_epoch(&m);
        log.push(m);
    }
    Ok(FitResult {
        last: model,
        best: best.0,
        best_epoch: best.1,
        best_val: best.2,
        log,
        skipped_batches: skipped,
    })
}

const EVAL_CHUNK: usize = 64;

/// Squared rollout error summed over every element of frames `1..T` of the
/// given trajectories.
fn rollout_sq_error(model: &BinnModel, ds: &TrajectoryDataset, traj: &[usize]) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let rows = traj.len() * ds.n_agents;
    let x0 = Tensor::matrix(rows, ds.state_dim, traj.iter().flat_map(|&i| ds.frame(i, 0).to_vec()).collect());
    let x0 = tape.leaf(x0)?;
    let start = RolloutStart::encode(model, &mut tape, &bound, x0)?;
    let roll = model.rollout_vars(&mut tape, &bound, start, ds.frames - 1, None)?;
    let mut sum = 0.0;
    for (t, xh) in roll.x_hat.iter().enumerate() {
        let pred = tape.value(*xh).data();
        let target = traj.iter().flat_map(|&i| ds.frame(i, t + 1).iter().copied());
        sum += pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(sum)
}

/// Rollout MSE from each trajectory's first frame over the remaining
/// frames, averaged over trajectories, frames, agents and state dimensions.
pub fn evaluate_mse(ds: &TrajectoryDataset, model: &BinnModel) -> Result<f64, TrainError> {
    check_data(&model.config, ds, "evaluation")?;
    if ds.is_empty() {
        return Err(TrainError::Data("evaluation set is empty".into()));
    }
    let idx: Vec<usize> = (0..ds.n_traj()).collect();
    let parts = idx
        .par_chunks(EVAL_CHUNK)
        .map(|c| rollout_sq_error(model, ds, c))
        .collect::<Result<Vec<_>, _>>()?;
    let count = ds.n_traj() * (ds.frames - 1) * ds.frame_len();
    Ok(parts.iter().sum::<f64>() / count as f64)
}

/// Non-learned reference predictors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Every future frame equals the first.
    ConstantState,
    /// Positions move with the first frame's velocity; velocities stay fixed.
    ConstantVelocity,
}

/// MSE of a baseline predictor, normalized as [`evaluate_mse`].
pub fn baseline_mse(ds: &TrajectoryDataset, baseline: Baseline) -> Result<f64, TrainError> {
    if ds.is_empty() || ds.frames < 2 {
        return Err(TrainError::Data("baseline needs a nonempty set with at least 2 frames".into()));
    }
    let (n, d) = (ds.n_agents, ds.state_dim);
    let half = d / 2;
    let mut sum = 0.0;
    for i in 0..ds.n_traj() {
        let x0 = ds.frame(i, 0);
        for t in 1..ds.frames {
            let xt = ds.frame(i, t);
            for a in 0..n {
                for c in 0..d {
                    let base = x0[a * d + c];
                    let pred = match baseline {
                        Baseline::ConstantVelocity if c < half => base + x0[a * d + half + c] * ds.dt * t as f64,
                        _ => base,
                    };
                    sum += (pred - xt[a * d + c]).powi(2);
                }
            }
        }
    }
    Ok(sum / (ds.n_traj() * (ds.frames - 1) * n * d) as f64)
}

pub const METRICS_HEADER: [&str; 7] = ["epoch", "lr", "train_pred", "train_recon", "train_latent", "train_total", "val_pred"];

pub fn write_metrics_csv<W: io::Write>(log: &[EpochMetrics], out: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for m in log {
        w.write_record([
            m.epoch.to_string(),
            m.lr.to_string(),
            m.train_pred.to_string(),
            m.train_recon.to_string(),
            m.train_latent.to_string(),
            m.train_total.to_string(),
            m.val_pred.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: io::Read>(input: R) -> Result<Vec<EpochMetrics>, TrainError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
