//! Inspection of a trained model: latent traces, learned parameters,
//! exclusivity verdicts and equilibrium sweeps of the latent dynamics.

use std::fs;
use std::path::{Path, PathBuf};

use binn_core::diffcore::Tensor;
use binn_core::model::{BinnModel, SATURATION};
use binn_core::nod::{
    bifurcation_sweep, detect_mutual_exclusivity, hysteresis_sweep, linspace, BifurcationResult, EquilibriumSearch, ExclusivityReport,
    HysteresisTrace, SweepKind,
};
use binn_core::sims::TrajectoryDataset;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::svg::{plot, Series};
use crate::CliError;

/// Learned opinion-dynamics parameters in their mapped (positive) form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedParams {
    pub d: Vec<f64>,
    pub u: f64,
    pub alpha: Vec<f64>,
    /// Belief matrix, zero diagonal.
    pub a_o: Vec<Vec<f64>>,
    /// Signs of the off-diagonal entries, row-major, `'-'`, `'+'` or `'0'`.
    pub a_o_signs: String,
    /// Every off-diagonal entry is negative.
    pub all_off_diagonal_negative: bool,
    pub a_pre: Option<Vec<Vec<f64>>>,
}

pub fn learned_params(model: &BinnModel) -> LearnedParams {
    let (d, u, alpha) = model.intrinsics();
    let a_o = model.belief_matrix();
    let mut signs = String::new();
    let mut all_neg = true;
    for (r, row) in a_o.iter().enumerate() {
        for v in row.iter().enumerate().filter(|(c, _)| *c != r).map(|(_, v)| v) {
            signs.push(if *v < 0.0 {
                '-'
            } else if *v > 0.0 {
                '+'
            } else {
                '0'
            });
            all_neg &= *v < 0.0;
        }
    }
    LearnedParams {
        d,
        u,
        alpha,
        a_o,
        a_o_signs: signs,
        all_off_diagonal_negative: all_neg,
        a_pre: model.multiplier_matrix(),
    }
}

/// Encoder preferences `z` and inputs `b` of one observed trajectory, one
/// `N_a × N_o` matrix per frame.
pub fn latent_traces(model: &BinnModel, ds: &TrajectoryDataset, traj: usize) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>), CliError> {
    let (z, b) = model.encode_trajectory(ds.trajectory(traj), ds.frames)?;
    let to_mat = |t: &Tensor| DMatrix::from_fn(t.rows(), t.cols(), |r, c| t.at(r, c));
    Ok((z.iter().map(to_mat).collect(), b.iter().map(to_mat).collect()))
}

/// Exclusivity verdicts on preference traces pooled over the first
/// `n_traj` trajectories of `ds`.
pub fn exclusivity(model: &BinnModel, ds: &TrajectoryDataset, n_traj: usize) -> Result<Vec<ExclusivityReport>, CliError> {
    check_compatible(model, ds)?;
    let mut pooled = Vec::new();
    for i in 0..n_traj.min(ds.n_traj()) {
        pooled.extend(latent_traces(model, ds, i)?.0);
    }
    let a_o = model.belief_matrix();
    let n = a_o.len();
    let a_o = DMatrix::from_fn(n, n, |r, c| a_o[r][c]);
    Ok(detect_mutual_exclusivity(&pooled, &a_o)?)
}

pub fn check_compatible(model: &BinnModel, ds: &TrajectoryDataset) -> Result<(), CliError> {
    let c = &model.config;
    if c.n_agents != ds.n_agents || c.state_dim != ds.state_dim {
        return Err(CliError::Invalid(format!(
            "checkpoint expects {} agents × {} dims, dataset has {} × {}",
            c.n_agents, c.state_dim, ds.n_agents, ds.state_dim
        )));
    }
    Ok(())
}

/// Latent dynamics `ż(z, b, u)` of one isolated agent (no communication)
/// with input `b` on `category`, zero input elsewhere, and attention `u`.
pub fn isolated_field(model: &BinnModel, category: usize) -> impl Fn(&[f64], f64, f64) -> Vec<f64> + Sync + '_ {
    let (d, _, alpha) = model.intrinsics();
    let a_o = model.belief_matrix();
    move |z: &[f64], b: f64, u: f64| {
        (0..z.len())
            .map(|j| {
                let mut arg = alpha[j] * z[j];
                for (l, zl) in z.iter().enumerate().filter(|(l, _)| *l != j) {
                    arg += a_o[j][l] * zl;
                }
                let input = if j == category { b } else { 0.0 };
                -d[j] * z[j] + SATURATION.apply(u * arg) + input
            })
            .collect()
    }
}

/// [`isolated_field`] at the learned attention, as a function of the input.
pub fn isolated_rhs(model: &BinnModel, category: usize) -> impl Fn(&[f64], f64) -> Vec<f64> + Sync + '_ {
    let field = isolated_field(model, category);
    let u = model.intrinsics().1;
    move |z: &[f64], b: f64| field(z, b, u)
}

/// Start points for equilibrium searches: a regular grid over the box
/// `[−r, r]^n`, coarsened so the grid stays near 100 points.
pub fn search_grid(n: usize, r: f64) -> Vec<Vec<f64>> {
    let per_axis = ((100f64).powf(1.0 / n as f64).floor() as usize).max(2);
    let axis = linspace(-r, r, per_axis);
    let mut grid = vec![Vec::new()];
    for _ in 0..n {
        grid = grid
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    grid
}

fn sweep_search() -> EquilibriumSearch {
    EquilibriumSearch {
        max_steps: 200_000,
        ..EquilibriumSearch::default()
    }
}

fn check_category(model: &BinnModel, category: usize) -> Result<f64, CliError> {
    let no = model.config.n_options;
    if category >= no {
        return Err(CliError::Invalid(format!("category {category} out of range for {no} latent categories")));
    }
    let (d, _, _) = model.intrinsics();
    Ok(d.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Equilibria of the isolated-agent latent dynamics across an input sweep.
pub fn learned_input_sweep(model: &BinnModel, category: usize, range: (f64, f64), resolution: usize) -> Result<BifurcationResult, CliError> {
    let d_min = check_category(model, category)?;
    // the flow points inward outside this box, so every equilibrium lies inside it
    let r = (1.0 + range.0.abs().max(range.1.abs())) / d_min * 1.05;
    let grid = search_grid(model.config.n_options, r);
    Ok(bifurcation_sweep(isolated_rhs(model, category), SweepKind::Input, range, resolution, &grid, &sweep_search())?)
}

/// Equilibria of the isolated-agent latent dynamics across an attention
/// sweep at fixed input `b` on `category`.
pub fn learned_attention_sweep(
    model: &BinnModel,
    category: usize,
    b: f64,
    range: (f64, f64),
    resolution: usize,
) -> Result<BifurcationResult, CliError> {
    let d_min = check_category(model, category)?;
    let grid = search_grid(model.config.n_options, (1.0 + b.abs()) / d_min * 1.05);
    let field = isolated_field(model, category);
    Ok(bifurcation_sweep(move |z: &[f64], u: f64| field(z, b, u), SweepKind::Attention, range, resolution, &grid, &sweep_search())?)
}

/// Up-and-down input sweep of the isolated-agent latent dynamics from the origin.
pub fn learned_hysteresis(model: &BinnModel, category: usize, range: (f64, f64), resolution: usize) -> Result<HysteresisTrace, CliError> {
    check_category(model, category)?;
    let z0 = vec![0.0; model.config.n_options];
    Ok(hysteresis_sweep(isolated_rhs(model, category), &z0, range, resolution, &sweep_search())?)
}

/// Writes a per-frame latent trace CSV: `t,agent,z_0..,b_0..`.
pub fn write_trace_csv(path: &Path, z: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> Result<(), CliError> {
    let no = z.first().map_or(0, |m| m.ncols());
    let mut out = String::from("t,agent");
    for j in 0..no {
        out.push_str(&format!(",z_{j}"));
    }
    for j in 0..no {
        out.push_str(&format!(",b_{j}"));
    }
    out.push('\n');
    for (t, (zt, bt)) in z.iter().zip(b).enumerate() {
        for a in 0..zt.nrows() {
            out.push_str(&format!("{t},{a}"));
            for v in zt.row(a).iter().chain(bt.row(a).iter()) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn trace_svg(z: &[DMatrix<f64>], agent: usize, title: &str) -> String {
    let no = z.first().map_or(0, |m| m.ncols());
    let series: Vec<Series> = (0..no)
        .map(|j| Series::line(format!("z_{j}"), z.iter().enumerate().map(|(t, m)| (t as f64, m[(agent, j)])).collect()))
        .collect();
    plot(title, "frame", "preference", &series)
}

/// Scatter of a sweep: stable and unstable equilibria as separate series.
pub fn sweep_svg(res: &BifurcationResult, component: usize, title: &str, x_label: &str) -> String {
    let mut stable = Vec::new();
    let mut unstable = Vec::new();
    for p in &res.points {
        for e in &p.equilibria {
            let pt = (p.value, e.z.get(component).copied().unwrap_or(f64::NAN));
            if e.stable {
                stable.push(pt);
            } else {
                unstable.push(pt);
            }
        }
    }
    plot(title, x_label, "equilibrium", &[Series::dots("stable", stable), Series::dots("unstable", unstable)])
}

pub fn write_hysteresis_csv(path: &Path, h: &HysteresisTrace, component: usize) -> Result<(), CliError> {
    let mut out = String::from("b,forward,backward\n");
    for (i, b) in h.b.iter().enumerate() {
        out.push_str(&format!("{b},{},{}\n", h.forward[i][component], h.backward[i][component]));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn hysteresis_svg(h: &HysteresisTrace, component: usize, title: &str) -> String {
    let pick = |tr: &[Vec<f64>]| h.b.iter().zip(tr).map(|(b, z)| (*b, z[component])).collect();
    plot(title, "b", "z", &[Series::line("forward", pick(&h.forward)), Series::line("backward", pick(&h.backward))])
}

/// Outcome of [`export_analysis`].
#[derive(Debug, Clone, Serialize)]
pub struct AnalysisSummary {
    pub params: LearnedParams,
    /// Verdicts per category pair, or why none could be formed.
    pub exclusivity: Result<Vec<ExclusivityReport>, String>,
    /// Sweeps that could not be completed, e.g. at a marginal fixed point.
    pub sweep_errors: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// Writes traces, learned parameters, exclusivity verdicts, an input sweep
/// of the learned latent dynamics and line plots for each CSV into `out`.
pub fn export_analysis(model: &BinnModel, ds: &TrajectoryDataset, out: &Path, n_traj: usize, category: usize) -> Result<AnalysisSummary, CliError> {
    check_compatible(model, ds)?;
    fs::create_dir_all(out.join("traces"))?;
    let mut files = Vec::new();
    let n = n_traj.min(ds.n_traj());
    for i in 0..n {
        let (z, b) = latent_traces(model, ds, i)?;
        let csv = out.join("traces").join(format!("traj_{i}.csv"));
        write_trace_csv(&csv, &z, &b)?;
        let svg = csv.with_extension("svg");
        fs::write(&svg, trace_svg(&z, 0, &format!("trajectory {i}, agent 0")))?;
        files.extend([csv, svg]);
    }

    let params = learned_params(model);
    let p = out.join("params.json");
    fs::write(&p, serde_json::to_vec_pretty(&params)?)?;
    files.push(p);

    let exclusivity = match exclusivity(model, ds, n) {
        Ok(r) => Ok(r),
        Err(e) => {
            log::warn!("exclusivity: {e}");
            Err(e.to_string())
        }
    };
    let p = out.join("exclusivity.json");
    let body = match &exclusivity {
        Ok(r) => serde_json::json!({ "reports": r }),
        Err(e) => serde_json::json!({ "error": e }),
    };
    fs::write(&p, serde_json::to_vec_pretty(&body)?)?;
    files.push(p);

    let mut sweep_errors = Vec::new();
    match learned_input_sweep(model, category, (-2.0, 2.0), 81) {
        Ok(sweep) => {
            let csv = out.join("bifurcation.csv");
            sweep.write_csv(fs::File::create(&csv)?, category)?;
            let svg = csv.with_extension("svg");
            fs::write(&svg, sweep_svg(&sweep, category, "equilibria of the learned latent dynamics", "b"))?;
            files.extend([csv, svg]);
        }
        Err(e) => sweep_errors.push(format!("input sweep: {e}")),
    }
    match learned_hysteresis(model, category, (-2.0, 2.0), 81) {
        Ok(hyst) => {
            let csv = out.join("hysteresis.csv");
            write_hysteresis_csv(&csv, &hyst, category)?;
            let svg = csv.with_extension("svg");
            fs::write(&svg, hysteresis_svg(&hyst, category, "input sweep up and down"))?;
            files.extend([csv, svg]);
        }
        Err(e) => sweep_errors.push(format!("hysteresis: {e}")),
    }
    for e in &sweep_errors {
        log::warn!("{e}");
    }

    Ok(AnalysisSummary {
        params,
        exclusivity,
        sweep_errors,
        files,
    })
}
