use binn_core::diffcore::{grad_check_many, grad_check_many_extrapolated, Activation, Tape, Tensor};
use binn_core::model::*;
use binn_core::sims::TrajectoryDataset;
use binn_core::train::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg(comm: CommVariant) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 4,
        hidden: 8,
        n_options: 2,
        activation: Activation::Tanh,
        comm,
        scheduler: None,
        shard_size: 2,
        ..TrainConfig::default()
    }
}

fn random_dataset(seed: u64, n: usize, frames: usize, agents: usize) -> TrajectoryDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * frames * agents * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    TrajectoryDataset::new("rand", frames, agents, 4, 0.1, data).unwrap()
}

fn model_for(ds: &TrajectoryDataset, cfg: &TrainConfig) -> BinnModel {
    BinnModel::new(model_config(cfg, ds), cfg.seed).unwrap()
}

/// Trajectories produced by the model itself from random first frames.
fn self_generated(model: &BinnModel, seed: u64, n: usize, frames: usize) -> TrajectoryDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (na, d) = (model.config.n_agents, model.config.state_dim);
    let mut data = Vec::new();
    for _ in 0..n {
        let x0 = Tensor::matrix(na, d, (0..na * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (xs, _) = model.rollout(&x0, frames - 1).unwrap();
        data.extend_from_slice(x0.data());
        for x in xs {
            data.extend_from_slice(x.data());
        }
    }
    TrajectoryDataset::new("self", frames, na, d, model.config.dt, data).unwrap()
}

#[test]
fn latent_term_matches_scalar_oracle() {
    let ds = random_dataset(1, 3, 2, 3);
    let cfg = tiny_cfg(CommVariant::InverseDistance);
    let mut model = model_for(&ds, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in &mut model.params {
        if p.name.starts_with("rho") || p.name == "a_o" {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
    }
    let got = loss_components(&model, &ds, &[0, 1, 2], &cfg).unwrap();

    let (d, u, alpha) = model.intrinsics();
    let ao = model.belief_matrix();
    let (na, no) = (3, 2);
    let mut sum = 0.0;
    for i in 0..3 {
        let x0 = Tensor::matrix(na, 4, ds.frame(i, 0).to_vec());
        let x1 = Tensor::matrix(na, 4, ds.frame(i, 1).to_vec());
        let z0 = model.encode_preferences(&x0).unwrap();
        let z1 = model.encode_preferences(&x1).unwrap();
        let b = model.encode_env_input(&x0).unwrap();
        let a = model.comm_matrix(&x0).unwrap();
        for r in 0..na {
            for j in 0..no {
                let mut arg = alpha[j] * z0.at(r, j);
                for k in (0..na).filter(|&k| k != r) {
                    arg += a.at(r, k) * z0.at(k, j);
                }
                for l in (0..no).filter(|&l| l != j) {
                    arg += ao[j][l] * z0.at(r, l);
                    for k in (0..na).filter(|&k| k != r) {
                        arg += a.at(r, k) * ao[j][l] * z0.at(k, l);
                    }
                }
                let f = -d[j] * z0.at(r, j) + (u * arg).tanh() + b.at(r, j);
                let rate = (z1.at(r, j) - z0.at(r, j)) / 0.1;
                sum += (rate - f).powi(2);
            }
        }
    }
    let want = sum / (3 * na) as f64;
    assert!((got.latent - want).abs() < 1e-10, "{} vs {want}", got.latent);
}

#[test]
fn self_generated_batch_has_zero_prediction_loss() {
    let cfg = tiny_cfg(CommVariant::SquaredDistance);
    let shape = random_dataset(0, 1, 5, 2);
    let model = model_for(&shape, &cfg);
    let ds = self_generated(&model, 3, 4, 5);
    let l = loss_components(&model, &ds, &[0, 1, 2, 3], &cfg).unwrap();
    assert!(l.pred < 1e-24, "{}", l.pred);
    assert!(l.recon > 0.0);
    assert!(evaluate_mse(&ds, &model).unwrap() < 1e-24);
}

#[test]
fn constant_decoder_on_constant_data_has_zero_loss() {
    let cfg = tiny_cfg(CommVariant::SquaredDistance);
    let c = [0.3, -0.2, 0.0, 0.0];
    let ds = TrajectoryDataset::new("flat", 3, 2, 4, 0.1, c.repeat(2 * 3 * 2)).unwrap();
    let mut model = model_for(&ds, &cfg);
    for p in &mut model.params {
        if p.name.contains('.') {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    model.params.iter_mut().find(|p| p.name == "dx.e2v.b3").unwrap().value = Tensor::vector(c.to_vec());
    let l = loss_components(&model, &ds, &[0, 1], &cfg).unwrap();
    assert_eq!((l.pred, l.recon, l.latent, l.total), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let ds = random_dataset(11, 2, 4, 2);
    let cfg = tiny_cfg(CommVariant::SquaredDistance);
    let model = model_for(&ds, &cfg);
    let scale = LossScale { rows: 4, frames: 4 };
    let x = stack_frames(&ds, &[0, 1]);
    let params: Vec<Tensor> = model.params.iter().map(|p| p.value.clone()).collect();
    let loss = |tape: &mut Tape, vars: &[binn_core::diffcore::Var]| {
        let bound = model.bind_vars(tape, vars.to_vec()).unwrap();
        let xv = tape.leaf(x.clone())?;
        Ok(loss_on_tape(&model, tape, &bound, xv, 4, scale, &cfg).unwrap().total)
    };
    let start = std::time::Instant::now();
    let report = grad_check_many_extrapolated(loss, &params, 0.1).unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
    // plain central differences agree up to their round-off floor
    let plain = grad_check_many(loss, &params, 1e-5).unwrap();
    assert!((plain.analytic - plain.numeric).abs() < 1e-10, "{plain:?}");
}

#[test]
fn every_parameter_receives_gradient() {
    let ds = random_dataset(4, 3, 3, 3);
    let cfg = tiny_cfg(CommVariant::LearnedMultiplier);
    let model = model_for(&ds, &cfg);
    let (_, g) = batch_loss(&model, &ds, &[0, 1, 2], &cfg, true).unwrap();
    let g = g.unwrap();
    assert_eq!(g.len(), model.params.len());
    for (p, gp) in model.params.iter().zip(&g) {
        assert_eq!(gp.len(), p.value.len());
        assert!(gp.iter().any(|v| *v != 0.0), "{} has zero gradient", p.name);
    }
}

#[test]
fn sharding_does_not_change_the_batch() {
    let ds = random_dataset(5, 6, 3, 2);
    let mut cfg = tiny_cfg(CommVariant::InverseDistance);
    let model = model_for(&ds, &cfg);
    let idx = [5, 0, 3, 1, 4, 2];
    cfg.shard_size = 6;
    let (whole, gw) = batch_loss(&model, &ds, &idx, &cfg, true).unwrap();
    cfg.shard_size = 1;
    let (split, gs) = batch_loss(&model, &ds, &idx, &cfg, true).unwrap();
    assert!((whole.total - split.total).abs() < 1e-12 * whole.total);
    for (a, b) in gw.unwrap().iter().flatten().zip(gs.unwrap().iter().flatten()) {
        assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let ds = random_dataset(6, 4, 3, 2);
    let cfg = TrainConfig { lr: 0.0, ..tiny_cfg(CommVariant::InverseDistance) };
    let res = fit(&ds, &ds, &cfg).unwrap();
    assert_eq!(res.last, model_for(&ds, &cfg));
    assert_eq!(res.log.len(), 1);
    let m = res.log[0];
    assert!(m.train_total > 0.0 && m.val_pred > 0.0);
    assert_eq!(m.train_total, LossBreakdown::combine(m.train_pred, m.train_recon, m.train_latent, 1.0, 1.0).total);
}

#[test]
fn fixed_seed_training_is_reproducible() {
    let ds = random_dataset(7, 10, 3, 2);
    let val = random_dataset(8, 3, 3, 2);
    let cfg = TrainConfig { epochs: 3, ..tiny_cfg(CommVariant::InverseDistance) };
    let a = fit(&ds, &val, &cfg).unwrap();
    let b = fit(&ds, &val, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    let bytes = |m: &BinnModel| checkpoint_bytes(m, serde_json::to_value(&cfg).unwrap()).unwrap();
    assert_eq!(bytes(&a.best), bytes(&b.best));
    assert!(a.log.last().unwrap().train_total < a.log[0].train_total);
}

#[test]
fn mismatched_validation_set_is_rejected() {
    let ds = random_dataset(9, 2, 3, 2);
    let val = random_dataset(9, 2, 3, 3);
    assert!(matches!(fit(&ds, &val, &tiny_cfg(CommVariant::InverseDistance)), Err(TrainError::Data(_))));
}

#[test]
fn baselines_on_a_linear_trajectory() {
    // one agent, p_t = p0 + v t Δt with constant v
    let (dt, frames) = (0.5, 4);
    let (p0, v) = ([1.0, -2.0], [0.4, 1.5]);
    let mut data = Vec::new();
    for t in 0..frames {
        let s = dt * t as f64;
        data.extend([p0[0] + v[0] * s, p0[1] + v[1] * s, v[0], v[1]]);
    }
    let ds = TrajectoryDataset::new("line", frames, 1, 4, dt, data).unwrap();
    let speed2 = v[0] * v[0] + v[1] * v[1];
    let want: f64 = (1..frames).map(|t| speed2 * (dt * t as f64).powi(2)).sum::<f64>() / (4 * (frames - 1)) as f64;
    assert!((baseline_mse(&ds, Baseline::ConstantState).unwrap() - want).abs() < 1e-14);
    assert!(baseline_mse(&ds, Baseline::ConstantVelocity).unwrap() < 1e-28);
}

#[test]
fn metrics_csv_round_trip() {
    let log: Vec<EpochMetrics> = (0..3)
        .map(|e| EpochMetrics {
            epoch: e,
            lr: 1e-3 / (e + 1) as f64,
            train_pred: 0.1 * e as f64,
            train_recon: 1.0 / 3.0,
            train_latent: 2.5e-7,
            train_total: 7.0,
            val_pred: 0.123456789012345,
        })
        .collect();
    let mut buf = Vec::new();
    write_metrics_csv(&log, &mut buf).unwrap();
    assert!(String::from_utf8_lossy(&buf).starts_with("epoch,lr,train_pred,train_recon,train_latent,train_total,val_pred\n"));
    assert_eq!(read_metrics_csv(&buf[..]).unwrap(), log);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn breakdown_total_is_the_weighted_sum(seed in 0u64..1000, g1 in 0.0f64..3.0, g2 in 0.0f64..3.0) {
        let ds = random_dataset(seed, 3, 3, 2);
        let cfg = TrainConfig { gamma1: g1, gamma2: g2, ..tiny_cfg(CommVariant::InverseDistance) };
        let l = loss_components(&model_for(&ds, &cfg), &ds, &[0, 1, 2], &cfg).unwrap();
        prop_assert!(l.pred >= 0.0 && l.recon >= 0.0 && l.latent >= 0.0);
        prop_assert_eq!(l.total, l.pred + g1 * l.recon + g2 * l.latent);
    }

    #[test]
    fn scheduled_rate_never_increases(lr in 1e-6f64..1.0, step in 1usize..300, gamma in 0.01f64..=1.0, epoch in 0usize..5000) {
        let a = scheduler_lr(lr, epoch, step, gamma);
        let b = scheduler_lr(lr, epoch + 1, step, gamma);
        prop_assert!(b <= a && a <= lr);
    }
}
