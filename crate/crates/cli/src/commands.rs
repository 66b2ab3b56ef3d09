use std::fs;
use std::path::{Path, PathBuf};

use binn_core::diffcore::Tensor;
use binn_core::model::{load_checkpoint, save_checkpoint, BinnModel, CheckpointMeta};
use binn_core::nod::{
    bifurcation_sweep, grid_1d, hysteresis_sweep, nod_rhs_reduced, BifurcationResult, EquilibriumSearch, ExclusivityReport, ReducedParams,
    SweepKind,
};
use binn_core::sims::{
    export_csv, generate_splits, import_csv, load_dataset, save_dataset, SimConfig, SplitSizes, SystemKind, TrajectoryDataset,
};
use binn_core::train::{baseline_mse, evaluate_mse, fit_with, write_metrics_csv, Baseline, EpochMetrics, FitResult, TrainConfig};
use nalgebra::DVector;

use crate::analysis::{self, export_analysis, learned_attention_sweep, learned_input_sweep, sweep_svg};
use crate::args::*;
use crate::manifest::ManifestBuilder;
use crate::svg::{plot, Series};
use crate::CliError;

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::ImportCsv(a) => import(&a),
        Command::Train(a) => train(&a).map(|_| ()),
        Command::Eval(a) => eval(&a),
        Command::Rollout(a) => rollout(&a),
        Command::Bifurcation(a) => bifurcation(&a),
        Command::Analyze(a) => analyze(&a),
        Command::Reduce(a) => reduce(&a),
    }
}

/// `dir` itself when it holds a dataset, otherwise its `split` subdirectory.
pub fn split_dir(dir: &Path, split: &str) -> PathBuf {
    if dir.join("meta.json").is_file() {
        dir.to_path_buf()
    } else {
        dir.join(split)
    }
}

fn load_split(dir: &Path, split: &str) -> Result<(TrajectoryDataset, PathBuf), CliError> {
    let p = split_dir(dir, split);
    if !p.join("meta.json").is_file() {
        return Err(CliError::Invalid(format!("no dataset at {} (expected meta.json)", p.display())));
    }
    Ok((load_dataset(&p)?, p))
}

fn load_model(path: &Path) -> Result<(BinnModel, CheckpointMeta), CliError> {
    if !path.is_file() {
        return Err(CliError::Invalid(format!("checkpoint {} not found", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

fn generate(a: &GenerateArgs) -> Result<(), CliError> {
    let mut cfg = SimConfig::standard(a.system, a.seed);
    if let Some(n) = a.agents {
        cfg.n_agents = n;
    }
    let base = if a.full_scale { SplitSizes::FULL } else { SplitSizes::DESK };
    let sizes = SplitSizes {
        train: a.n_train.unwrap_or(base.train),
        val: a.n_val.unwrap_or(base.val),
        test: a.n_test.unwrap_or(base.test),
    };
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(CliError::Invalid("every split needs at least one trajectory".into()));
    }
    let mut m = ManifestBuilder::new("generate", serde_json::json!({ "sim": cfg, "splits": sizes }), Some(a.seed));
    let splits = generate_splits(&cfg, sizes)?;
    for (name, ds) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let dir = a.out.join(name);
        save_dataset(ds, &dir)?;
        m.output(dir);
    }
    eprintln!(
        "generated {} trajectories of {} frames ({} resampled)",
        sizes.train + sizes.val + sizes.test,
        splits.train.frames,
        splits.rejected
    );
    m.finish(&a.out)?;
    Ok(())
}

fn import(a: &ImportArgs) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new(
        "import-csv",
        serde_json::json!({ "dt": a.dt, "has_velocity": a.has_velocity }),
        None,
    );
    let ds = import_csv(&a.csv, a.has_velocity, a.dt)?;
    m.input(&a.csv);
    save_dataset(&ds, &a.out)?;
    m.output(&a.out);
    eprintln!("imported {} trajectories × {} frames × {} agents", ds.n_traj(), ds.frames, ds.n_agents);
    m.finish(&a.out)?;
    Ok(())
}

/// System whose generated dataset carries this name, if any.
fn system_from_name(name: &str) -> Option<SystemKind> {
    SystemKind::ALL
        .into_iter()
        .filter(|k| name == k.name() || name.starts_with(&format!("{}_", k.name())))
        .max_by_key(|k| k.name().len())
}

/// Training configuration from, in increasing precedence: per-system
/// defaults (explicit or inferred from the dataset name), the JSON file,
/// and flags.
pub fn resolve_train_config(a: &TrainArgs, dataset_name: Option<&str>) -> Result<TrainConfig, CliError> {
    let system = a.system.or_else(|| dataset_name.and_then(system_from_name));
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?;
            let base = serde_json::to_value(system.map_or_else(TrainConfig::default, TrainConfig::for_system))?;
            let patch: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?;
            let serde_json::Value::Object(patch) = patch else {
                return Err(CliError::Invalid(format!("{}: expected a JSON object", p.display())));
            };
            let mut merged = base;
            for (k, v) in patch {
                if merged.get(&k).is_none() {
                    return Err(CliError::Invalid(format!("{}: unknown setting '{k}'", p.display())));
                }
                merged[k] = v;
            }
            serde_json::from_value(merged).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?
        }
        None => system.map_or_else(TrainConfig::default, TrainConfig::for_system),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.comm {
        cfg.comm = v;
    }
    if let Some(v) = a.latent_dim {
        cfg.n_options = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if a.desk_scale {
        cfg.epochs = cfg.epochs.min(100);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Settings stored in a checkpoint: everything but input paths.
pub fn checkpoint_hyperparameters(cfg: &TrainConfig) -> serde_json::Value {
    let stored = TrainConfig {
        train_data: None,
        val_data: None,
        ..cfg.clone()
    };
    serde_json::to_value(stored).unwrap_or(serde_json::Value::Null)
}

fn progress(m: &EpochMetrics) {
    eprintln!(
        "epoch {:>4}  lr {:.3e}  pred {:.4e}  recon {:.4e}  latent {:.4e}  total {:.4e}  val {:.4e}",
        m.epoch, m.lr, m.train_pred, m.train_recon, m.train_latent, m.train_total, m.val_pred
    );
}

/// Fits on `train`/`val` and writes `best.ckpt`, `last.ckpt`, `metrics.csv`,
/// `metrics.svg` and `config.json` into `out`.
pub fn train_into(
    cfg: &TrainConfig,
    train: &TrajectoryDataset,
    val: &TrajectoryDataset,
    out: &Path,
    manifest: &mut ManifestBuilder,
) -> Result<FitResult, CliError> {
    fs::create_dir_all(out)?;
    let res = fit_with(train, val, cfg, None, progress)?;
    let hyper = checkpoint_hyperparameters(cfg);
    for (name, model) in [("best.ckpt", &res.best), ("last.ckpt", &res.last)] {
        save_checkpoint(model, hyper.clone(), &out.join(name))?;
        manifest.output(out.join(name));
    }
    let metrics = out.join("metrics.csv");
    write_metrics_csv(&res.log, fs::File::create(&metrics)?)?;
    let curve = |f: fn(&EpochMetrics) -> f64| res.log.iter().map(|m| (m.epoch as f64, f(m).max(1e-300).log10())).collect();
    let svg = plot(
        "training curves",
        "epoch",
        "log10 loss",
        &[
            Series::line("train total", curve(|m| m.train_total)),
            Series::line("val pred MSE", curve(|m| m.val_pred)),
        ],
    );
    fs::write(out.join("metrics.svg"), svg)?;
    fs::write(out.join("config.json"), serde_json::to_vec_pretty(&hyper)?)?;
    for f in ["metrics.csv", "metrics.svg", "config.json"] {
        manifest.output(out.join(f));
    }
    Ok(res)
}

fn train(a: &TrainArgs) -> Result<FitResult, CliError> {
    let file_cfg = resolve_train_config(&TrainArgs { config: a.config.clone(), ..a.clone() }, None)?;
    let train_path = match (&file_cfg.train_data, &a.data) {
        (_, Some(root)) => split_dir(root, "train"),
        (Some(p), None) => PathBuf::from(p),
        (None, None) => return Err(CliError::Invalid("no training data: pass --data or set train_data in the config".into())),
    };
    let val_path = match (&file_cfg.val_data, &a.data) {
        (_, Some(root)) => split_dir(root, "val"),
        (Some(p), None) => PathBuf::from(p),
        (None, None) => unreachable!("checked with the training path"),
    };
    let (train, _) = load_split(&train_path, "train")?;
    let (val, _) = load_split(&val_path, "val")?;
    let mut cfg = resolve_train_config(a, Some(&train.name))?;
    cfg.train_data = Some(train_path.display().to_string());
    cfg.val_data = Some(val_path.display().to_string());
    let mut m = ManifestBuilder::new("train", serde_json::to_value(&cfg)?, Some(cfg.seed));
    m.input(&train_path);
    m.input(&val_path);
    let res = train_into(&cfg, &train, &val, &a.out, &mut m)?;
    eprintln!("best epoch {} with val MSE {:.6e}", res.best_epoch, res.best_val);
    m.finish(&a.out)?;
    Ok(res)
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let (model, _) = load_model(&a.ckpt)?;
    let (ds, _) = load_split(&a.data, "test")?;
    analysis::check_compatible(&model, &ds)?;
    let mse = evaluate_mse(&ds, &model)?;
    println!("test_mse={mse:e}");
    if a.baselines {
        println!("constant_state_mse={:e}", baseline_mse(&ds, Baseline::ConstantState)?);
        println!("constant_velocity_mse={:e}", baseline_mse(&ds, Baseline::ConstantVelocity)?);
    }
    Ok(())
}

fn rollout(a: &RolloutArgs) -> Result<(), CliError> {
    let (model, _) = load_model(&a.ckpt)?;
    let (ds, path) = load_split(&a.data, "test")?;
    analysis::check_compatible(&model, &ds)?;
    let horizon = a.horizon.unwrap_or(ds.frames - 1);
    if horizon == 0 {
        return Err(CliError::Invalid("horizon must be at least 1".into()));
    }
    let n = a.n_traj.min(ds.n_traj());
    if n == 0 {
        return Err(CliError::Invalid("no trajectories to roll out".into()));
    }
    let mut m = ManifestBuilder::new("rollout", serde_json::json!({ "horizon": horizon, "n_traj": n }), None);
    m.input(&path);
    m.input(&a.ckpt);
    fs::create_dir_all(&a.out)?;
    let (na, d) = (ds.n_agents, ds.state_dim);
    let mut pred = Vec::new();
    let mut latent = String::from("traj,t,agent");
    for j in 0..model.config.n_options {
        latent.push_str(&format!(",z_{j}"));
    }
    latent.push('\n');
    let mut plots = Vec::new();
    for i in 0..n {
        let x0 = Tensor::matrix(na, d, ds.frame(i, 0).to_vec());
        let (xs, trace) = model.rollout(&x0, horizon)?;
        pred.extend_from_slice(x0.data());
        for x in &xs {
            pred.extend_from_slice(x.data());
        }
        for (t, z) in trace.z.iter().enumerate() {
            for ag in 0..na {
                latent.push_str(&format!("{i},{t},{ag}"));
                for v in &z.data()[ag * z.cols()..(ag + 1) * z.cols()] {
                    latent.push_str(&format!(",{v}"));
                }
                latent.push('\n');
            }
        }
        let first = |f: &[f64]| f[0];
        let truth: Vec<(f64, f64)> = (0..ds.frames).map(|t| (t as f64, first(ds.frame(i, t)))).collect();
        let mut guess = vec![(0.0, x0.data()[0])];
        guess.extend(xs.iter().enumerate().map(|(t, x)| ((t + 1) as f64, x.data()[0])));
        plots.push((i, truth, guess));
    }
    let predicted = TrajectoryDataset::new(format!("{}_rollout", ds.name), horizon + 1, na, d, ds.dt, pred)?;
    let truth = ds.subset(&(0..n).collect::<Vec<_>>());
    for (name, set) in [("predicted.csv", &predicted), ("truth.csv", &truth)] {
        export_csv(set, fs::File::create(a.out.join(name))?)?;
        m.output(a.out.join(name));
    }
    fs::write(a.out.join("latent.csv"), latent)?;
    m.output(a.out.join("latent.csv"));
    for (i, truth, guess) in plots {
        let name = format!("traj_{i}.svg");
        let svg = plot(
            &format!("trajectory {i}, agent 0, first state coordinate"),
            "frame",
            "x_0",
            &[Series::line("truth", truth), Series::line("rollout", guess)],
        );
        fs::write(a.out.join(&name), svg)?;
        m.output(a.out.join(name));
    }
    m.finish(&a.out)?;
    Ok(())
}

/// Single-agent sweep of the reduced dynamics `ż = −d z + tanh(u α z) + b`.
pub fn single_agent_sweep(d: f64, alpha: f64, u: f64, b: f64, kind: SweepKind, range: (f64, f64), resolution: usize) -> Result<BifurcationResult, CliError> {
    let r = (1.0 + b.abs().max(range.0.abs()).max(range.1.abs())) / d * 1.05;
    let grid = grid_1d(-r, r, 41);
    let rhs = move |z: &[f64], s: f64| {
        let (uu, bb) = match kind {
            SweepKind::Attention => (s, b),
            SweepKind::Input => (u, s),
        };
        let p = ReducedParams::single(d, uu, alpha, bb, 1.0);
        nod_rhs_reduced(&DVector::from_row_slice(z), &p, binn_core::diffcore::Activation::Tanh)
            .map(|v| v.as_slice().to_vec())
            .unwrap_or_else(|_| vec![f64::NAN; z.len()])
    };
    Ok(bifurcation_sweep(rhs, kind, range, resolution, &grid, &EquilibriumSearch::default())?)
}

fn bifurcation(a: &BifurcationArgs) -> Result<(), CliError> {
    if !(a.to > a.from) || a.resolution < 2 {
        return Err(CliError::Invalid("need --to > --from and --resolution ≥ 2".into()));
    }
    let kind: SweepKind = a.sweep.into();
    let range = (a.from, a.to);
    let mut m = ManifestBuilder::new(
        "bifurcation",
        serde_json::json!({
            "sweep": kind, "d": a.d, "alpha": a.alpha, "u": a.u, "b": a.b,
            "range": [a.from, a.to], "resolution": a.resolution, "category": a.category,
        }),
        None,
    );
    fs::create_dir_all(&a.out)?;
    let (res, component, model) = match &a.ckpt {
        Some(p) => {
            let (model, _) = load_model(p)?;
            m.input(p);
            let res = match kind {
                SweepKind::Input => learned_input_sweep(&model, a.category, range, a.resolution)?,
                SweepKind::Attention => learned_attention_sweep(&model, a.category, a.b, range, a.resolution)?,
            };
            (res, a.category, Some(model))
        }
        None => {
            if !(a.d > 0.0 && a.alpha > 0.0 && a.u >= 0.0) {
                return Err(CliError::Invalid("need d > 0, alpha > 0 and u ≥ 0".into()));
            }
            (single_agent_sweep(a.d, a.alpha, a.u, a.b, kind, range, a.resolution)?, 0, None)
        }
    };
    let csv = a.out.join("sweep.csv");
    res.write_csv(fs::File::create(&csv)?, component)?;
    let x_label = match kind {
        SweepKind::Attention => "u",
        SweepKind::Input => "b",
    };
    fs::write(a.out.join("sweep.svg"), sweep_svg(&res, component, "equilibria", x_label))?;
    let mut summary = serde_json::json!({ "u_star": res.u_star, "folds": res.folds });
    if kind == SweepKind::Attention && model.is_none() {
        summary["u_star_analytic"] = serde_json::json!(a.d / a.alpha);
    }
    if kind == SweepKind::Input {
        let h = match &model {
            Some(mo) => analysis::learned_hysteresis(mo, a.category, range, a.resolution)?,
            None => {
                let (d, alpha, u) = (a.d, a.alpha, a.u);
                let rhs = move |z: &[f64], b: f64| vec![-d * z[0] + (u * alpha * z[0]).tanh() + b];
                hysteresis_sweep(rhs, &[0.0], range, a.resolution, &EquilibriumSearch::default())?
            }
        };
        analysis::write_hysteresis_csv(&a.out.join("hysteresis.csv"), &h, component)?;
        fs::write(a.out.join("hysteresis.svg"), analysis::hysteresis_svg(&h, component, "input sweep up and down"))?;
        summary["loop_width"] = serde_json::json!(h.loop_width(1e-3));
        m.output(a.out.join("hysteresis.csv"));
    }
    fs::write(a.out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    for f in ["sweep.csv", "sweep.svg", "summary.json"] {
        m.output(a.out.join(f));
    }
    match res.u_star {
        Some(u) => println!("u_star={u}"),
        None if kind == SweepKind::Attention => println!("u_star=none"),
        None => {}
    }
    m.finish(&a.out)?;
    Ok(())
}

fn analyze(a: &AnalyzeArgs) -> Result<(), CliError> {
    let (model, _) = load_model(&a.ckpt)?;
    let (ds, path) = load_split(&a.data, "test")?;
    let mut m = ManifestBuilder::new("analyze", serde_json::json!({ "n_traj": a.n_traj, "category": a.category }), None);
    m.input(&path);
    m.input(&a.ckpt);
    let summary = export_analysis(&model, &ds, &a.out, a.n_traj, a.category)?;
    println!("a_o_signs={}", summary.params.a_o_signs);
    match &summary.exclusivity {
        Ok(reports) => {
            for r in reports {
                println!(
                    "pair=({},{}) exclusive={} correlation={:.4} scale={:.4}",
                    r.pair.0, r.pair.1, r.exclusive, r.correlation, r.scale
                );
            }
        }
        Err(e) => println!("exclusivity=unavailable ({e})"),
    }
    for e in &summary.sweep_errors {
        println!("sweep_failed={e}");
    }
    for f in summary.files {
        m.output(f);
    }
    m.finish(&a.out)?;
    Ok(())
}

/// Outcome of [`reduce_latent`].
#[derive(Debug, Clone)]
pub struct Reduction {
    pub reports: Vec<ExclusivityReport>,
    pub config: TrainConfig,
    pub fit: FitResult,
}

/// Retrains with one latent category fewer when some category pair of
/// `model` is mutually exclusive on the first `probe` training trajectories.
pub fn reduce_latent(
    model: &BinnModel,
    cfg: &TrainConfig,
    train: &TrajectoryDataset,
    val: &TrajectoryDataset,
    probe: usize,
    out: Option<(&Path, &mut ManifestBuilder)>,
) -> Result<Reduction, CliError> {
    let reports = analysis::exclusivity(model, train, probe)?;
    if !reports.iter().any(|r| r.exclusive) {
        return Err(CliError::Invalid("no mutually exclusive category pair; the latent space cannot be reduced".into()));
    }
    let config = TrainConfig {
        n_options: model.config.n_options - 1,
        activation: model.config.activation,
        hidden: model.config.hidden,
        comm: model.config.comm,
        eps: model.config.eps,
        ..cfg.clone()
    };
    let fit = match out {
        Some((dir, m)) => train_into(&config, train, val, dir, m)?,
        None => fit_with(train, val, &config, None, |_| {})?,
    };
    Ok(Reduction { reports, config, fit })
}

pub const REDUCE_PROBE_TRAJECTORIES: usize = 64;

fn reduce(a: &ReduceArgs) -> Result<(), CliError> {
    let (model, meta) = load_model(&a.ckpt)?;
    let mut cfg: TrainConfig = serde_json::from_value(meta.hyperparameters.clone()).unwrap_or_default();
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (train, tp) = load_split(&a.data, "train")?;
    let (val, vp) = load_split(&a.data, "val")?;
    let mut m = ManifestBuilder::new("reduce", meta.hyperparameters.clone(), Some(cfg.seed));
    m.input(&a.ckpt);
    m.input(tp);
    m.input(vp);
    let red = reduce_latent(&model, &cfg, &train, &val, REDUCE_PROBE_TRAJECTORIES, Some((&a.out, &mut m)))?;
    fs::write(a.out.join("exclusivity.json"), serde_json::to_vec_pretty(&red.reports)?)?;
    m.output(a.out.join("exclusivity.json"));
    for r in &red.reports {
        println!("pair=({},{}) exclusive={} correlation={:.4}", r.pair.0, r.pair.1, r.exclusive, r.correlation);
    }
    println!("latent_dim={}", red.config.n_options);
    if split_dir(&a.data, "test").join("meta.json").is_file() {
        let (test, _) = load_split(&a.data, "test")?;
        println!("test_mse_original={:e}", evaluate_mse(&test, &model)?);
        println!("test_mse_reduced={:e}", evaluate_mse(&test, &red.fit.best)?);
    }
    m.finish(&a.out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train_args() -> TrainArgs {
        TrainArgs {
            data: None,
            config: None,
            out: PathBuf::from("out"),
            system: None,
            seed: None,
            comm: None,
            latent_dim: None,
            epochs: None,
            lr: None,
            batch_size: None,
            hidden: None,
            desk_scale: false,
        }
    }

    #[test]
    fn system_names_resolve_by_longest_prefix() {
        assert_eq!(system_from_name("pendulum_train"), Some(SystemKind::Pendulum));
        assert_eq!(system_from_name("double_pendulum_val"), Some(SystemKind::DoublePendulum));
        assert_eq!(system_from_name("mass_spring"), Some(SystemKind::MassSpring));
        assert_eq!(system_from_name("trajnet"), None);
    }

    #[test]
    fn flags_override_system_defaults() {
        let mut a = train_args();
        let cfg = resolve_train_config(&a, Some("double_pendulum_train")).unwrap();
        assert_eq!(cfg, TrainConfig::for_system(SystemKind::DoublePendulum));
        a.epochs = Some(700);
        a.desk_scale = true;
        a.hidden = Some(16);
        a.system = Some(SystemKind::Kuramoto);
        let cfg = resolve_train_config(&a, Some("double_pendulum_train")).unwrap();
        assert_eq!((cfg.epochs, cfg.hidden, cfg.activation), (100, 16, TrainConfig::for_system(SystemKind::Kuramoto).activation));
        a.batch_size = Some(0);
        assert!(matches!(resolve_train_config(&a, None), Err(CliError::Invalid(_))));
    }

    #[test]
    fn stored_hyperparameters_drop_paths() {
        let cfg = TrainConfig {
            train_data: Some("a".into()),
            val_data: Some("b".into()),
            ..TrainConfig::default()
        };
        let v = checkpoint_hyperparameters(&cfg);
        assert!(v["train_data"].is_null() && v["val_data"].is_null());
        assert_eq!(v["lr"], cfg.lr);
    }
}
