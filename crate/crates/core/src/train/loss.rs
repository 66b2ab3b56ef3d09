use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::diffcore::{Tape, Tensor, Var};
use crate::model::{BinnModel, Bound, ModelError, RolloutStart};
use crate::sims::TrajectoryDataset;

/// Loss terms and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pred: f64,
    pub recon: f64,
    pub latent: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(pred: f64, recon: f64, latent: f64, gamma1: f64, gamma2: f64) -> Self {
        Self {
            pred,
            recon,
            latent,
            total: pred + gamma1 * recon + gamma2 * latent,
        }
    }
}

/// Loss nodes on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub pred: Var,
    pub recon: Var,
    pub latent: Var,
    pub total: Var,
}

/// Normalizers shared by every shard of one batch so shard losses add up
/// to the batch loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossScale {
    /// Agent rows in the whole batch (`trajectories × agents`).
    pub rows: usize,
    pub frames: usize,
}

/// Frames of the given trajectories stacked `(frame, trajectory, agent)` row-major.
pub fn stack_frames(ds: &TrajectoryDataset, traj: &[usize]) -> Tensor {
    let (f, n, d) = (ds.frames, ds.n_agents, ds.state_dim);
    let mut data = Vec::with_capacity(f * traj.len() * n * d);
    for t in 0..f {
        for &i in traj {
            data.extend_from_slice(ds.frame(i, t));
        }
    }
    Tensor::matrix(f * traj.len() * n, d, data)
}

/// Builds the three loss terms for stacked frames `x` (`frames · rows × d`,
/// ordered by frame) on `tape`.
///
/// * prediction: squared state error of the unrolled model over frames
///   `1..T`, from frame 0 alone;
/// * reconstruction: squared error of decoding the frame-0 preferences;
/// * latent: squared error between finite-difference preference rates of
///   consecutive encoded frames and the latent dynamics evaluated on the
///   earlier frame (input and communication from ground truth).
///
/// Sums are divided by `scale.rows · (frames − 1)` (prediction, latent) and
/// `scale.rows` (reconstruction).
pub fn loss_on_tape(
    model: &BinnModel,
    tape: &mut Tape,
    bound: &Bound,
    x: Var,
    frames: usize,
    scale: LossScale,
    cfg: &TrainConfig,
) -> Result<LossVars, ModelError> {
    if frames < 2 {
        return Err(ModelError::Config(format!("loss needs at least 2 frames, got {frames}")));
    }
    let rows = tape.value(x).rows() / frames;
    let later = (frames - 1) * rows;
    let z_all = model.encode_z(tape, bound, x)?;
    let b_all = model.encode_b(tape, bound, x)?;
    let a_all = model.comm(tape, bound, x)?;
    let slice = |tape: &mut Tape, v: Var, start: usize, len: usize| tape.slice_rows(v, start, len);

    let z_prev = slice(tape, z_all, 0, later)?;
    let z_next = slice(tape, z_all, rows, later)?;
    let b_prev = slice(tape, b_all, 0, later)?;
    let a_prev = a_all.map(|a| slice(tape, a, 0, later)).transpose()?;
    let f = model.nod(tape, bound, z_prev, b_prev, a_prev)?;
    let dz = tape.sub(z_next, z_prev)?;
    let rate = tape.scale(dz, 1.0 / model.config.dt)?;
    let latent_sum = tape.squared_error(rate, f)?;

    let z0 = slice(tape, z_all, 0, rows)?;
    let x0 = slice(tape, x, 0, rows)?;
    let x0_hat = model.decode(tape, bound, z0)?;
    let recon_sum = tape.squared_error(x0_hat, x0)?;

    let start = RolloutStart {
        z: z0,
        b: slice(tape, b_all, 0, rows)?,
        a: a_all.map(|a| slice(tape, a, 0, rows)).transpose()?,
    };
    let truth = if cfg.env_from_truth {
        let mut tr = Vec::with_capacity(frames - 1);
        for t in 0..frames - 1 {
            let b = slice(tape, b_all, t * rows, rows)?;
            let a = a_all.map(|a| slice(tape, a, t * rows, rows)).transpose()?;
            tr.push((b, a));
        }
        Some(tr)
    } else {
        None
    };
    let roll = model.rollout_vars(tape, bound, start, frames - 1, truth.as_deref())?;
    let mut pred_sum: Option<Var> = None;
    for (t, xh) in roll.x_hat.iter().enumerate() {
        let target = slice(tape, x, (t + 1) * rows, rows)?;
        let e = tape.squared_error(*xh, target)?;
        pred_sum = Some(match pred_sum {
            Some(s) => tape.add(s, e)?,
            None => e,
        });
    }
    let pred_sum = pred_sum.expect("at least one predicted frame");

    let per_step = 1.0 / (scale.rows * (scale.frames - 1)) as f64;
    let pred = tape.scale(pred_sum, per_step)?;
    let recon = tape.scale(recon_sum, 1.0 / scale.rows as f64)?;
    let latent = tape.scale(latent_sum, per_step)?;
    let wr = tape.scale(recon, cfg.gamma1)?;
    let wl = tape.scale(latent, cfg.gamma2)?;
    let total = tape.add(pred, wr)?;
    let total = tape.add(total, wl)?;
    Ok(LossVars { pred, recon, latent, total })
}

/// Loss of one shard with the batch normalizers, plus parameter gradients
/// of its total when asked.
pub fn shard_loss(
    model: &BinnModel,
    ds: &TrajectoryDataset,
    traj: &[usize],
    scale: LossScale,
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Vec<f64>>>), ModelError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let x = tape.leaf(stack_frames(ds, traj))?;
    let l = loss_on_tape(model, &mut tape, &bound, x, ds.frames, scale, cfg)?;
    let item = |v: Var| tape.value(v).item();
    let breakdown = LossBreakdown {
        pred: item(l.pred),
        recon: item(l.recon),
        latent: item(l.latent),
        total: item(l.total),
    };
    let grads = if with_grad {
        let g = tape.backward(l.total)?;
        Some(
            bound
                .vars
                .iter()
                .zip(&model.params)
                .map(|(v, p)| g.get_slice(*v).map_or_else(|| vec![0.0; p.value.len()], <[f64]>::to_vec))
                .collect(),
        )
    } else {
        None
    };
    Ok((breakdown, grads))
}

/// Loss of a whole batch, evaluated shard by shard (in parallel) and summed
/// in shard order.
pub fn batch_loss(
    model: &BinnModel,
    ds: &TrajectoryDataset,
    traj: &[usize],
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Vec<f64>>>), TrainError> {
    use rayon::prelude::*;
    if ds.frames < 2 {
        return Err(TrainError::Data(format!("trajectories need at least 2 frames, got {}", ds.frames)));
    }
    let scale = LossScale {
        rows: traj.len() * ds.n_agents,
        frames: ds.frames,
    };
    let parts = traj
        .par_chunks(cfg.shard_size)
        .map(|chunk| shard_loss(model, ds, chunk, scale, cfg, with_grad))
        .collect::<Result<Vec<_>, _>>()?;
    let mut sum = LossBreakdown::default();
    let mut grads: Option<Vec<Vec<f64>>> = None;
    for (l, g) in parts {
        sum.pred += l.pred;
        sum.recon += l.recon;
        sum.latent += l.latent;
        if let Some(g) = g {
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += y;
                        }
                    }
                }
            }
        }
    }
    // the total is re-formed from its parts so the weighting identity is exact
    Ok((LossBreakdown::combine(sum.pred, sum.recon, sum.latent, cfg.gamma1, cfg.gamma2), grads))
}

/// Loss terms for a set of trajectories, without gradients.
pub fn loss_components(model: &BinnModel, ds: &TrajectoryDataset, traj: &[usize], cfg: &TrainConfig) -> Result<LossBreakdown, TrainError> {
    Ok(batch_loss(model, ds, traj, cfg, false)?.0)
}
