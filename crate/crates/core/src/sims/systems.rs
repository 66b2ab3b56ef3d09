use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{SimError, TrajectoryDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Pendulum,
    DoublePendulum,
    MassSpring,
    Kuramoto,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] = [Self::Pendulum, Self::DoublePendulum, Self::MassSpring, Self::Kuramoto];

    pub fn name(self) -> &'static str {
        match self {
            Self::Pendulum => "pendulum",
            Self::DoublePendulum => "double_pendulum",
            Self::MassSpring => "mass_spring",
            Self::Kuramoto => "kuramoto",
        }
    }

    /// Stored per-agent state width.
    pub fn state_dim(self) -> usize {
        match self {
            Self::Kuramoto => 2,
            _ => 4,
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| SimError::Config(format!("unknown system '{s}'")))
    }
}

/// Physical constants and couplings for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub g: f64,
    pub l1: f64,
    pub l2: f64,
    pub m1: f64,
    pub m2: f64,
    /// Symmetric coupling, row-major `N_a × N_a` (mass-spring, Kuramoto).
    pub k: Vec<f64>,
    /// Intrinsic frequencies (Kuramoto).
    pub omega: Vec<f64>,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            g: 9.81,
            l1: 1.0,
            l2: 1.0,
            m1: 1.0,
            m2: 1.0,
            k: Vec::new(),
            omega: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub kind: SystemKind,
    /// Integrator step.
    pub dt: f64,
    /// Integrator frames per trajectory, including the initial state.
    pub steps: usize,
    pub coarsening: usize,
    pub n_agents: usize,
    pub physics: SystemParams,
    /// Fixed coupling; when absent each trajectory samples its own graph.
    pub coupling: Option<Vec<f64>>,
    /// Fixed Kuramoto frequencies; sampled per trajectory when absent.
    pub omega: Option<Vec<f64>>,
    pub edge_prob: f64,
    pub spring_k: f64,
    /// Standard deviation of mass-spring initial positions and velocities.
    pub ic_sigma: f64,
    /// Standard deviation of Kuramoto initial phases.
    pub phase_sigma: f64,
    pub omega_range: (f64, f64),
    pub seed: u64,
}

impl SimConfig {
    /// Table-standard settings for `kind`.
    pub fn standard(kind: SystemKind, seed: u64) -> Self {
        let (dt, steps, coarsening, n_agents) = match kind {
            SystemKind::Pendulum => (1e-3, 5000, 100, 1),
            SystemKind::DoublePendulum => (5e-4, 5000, 100, 2),
            SystemKind::MassSpring => (5e-4, 5000, 100, 5),
            SystemKind::Kuramoto => (5e-4, 500, 10, 5),
        };
        Self {
            kind,
            dt,
            steps,
            coarsening,
            n_agents,
            physics: SystemParams::default(),
            coupling: None,
            omega: None,
            edge_prob: 0.5,
            spring_k: 2.5,
            ic_sigma: 0.3,
            phase_sigma: 2.0 * PI,
            omega_range: (1.0, 10.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.coarsening == 0 || self.steps < self.coarsening || self.steps % self.coarsening != 0 {
            return bad(format!("coarsening {} must divide steps {}", self.coarsening, self.steps));
        }
        let want_agents = match self.kind {
            SystemKind::Pendulum => Some(1),
            SystemKind::DoublePendulum => Some(2),
            _ => None,
        };
        if self.n_agents == 0 || want_agents.is_some_and(|n| n != self.n_agents) {
            return bad(format!("{} cannot have {} agents", self.kind, self.n_agents));
        }
        if let Some(k) = &self.coupling {
            let n = self.n_agents;
            if k.len() != n * n {
                return bad(format!("coupling has {} entries, expected {}", k.len(), n * n));
            }
            for i in 0..n {
                for j in 0..n {
                    if k[i * n + j] != k[j * n + i] {
                        return bad("coupling must be symmetric".into());
                    }
                    if i != j && k[i * n + j] != 0.0 && k[i * n + j] != self.spring_k {
                        return bad(format!("coupling entries must be 0 or {}", self.spring_k));
                    }
                }
            }
        }
        if let Some(w) = &self.omega {
            if w.len() != self.n_agents {
                return bad(format!("omega has {} entries, expected {}", w.len(), self.n_agents));
            }
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return bad(format!("edge probability {} outside [0, 1]", self.edge_prob));
        }
        Ok(())
    }

    /// Stored frames per trajectory.
    pub fn frames(&self) -> usize {
        self.steps / self.coarsening
    }

    /// Time between stored frames.
    pub fn dataset_dt(&self) -> f64 {
        self.dt * self.coarsening as f64
    }

    /// Length of the generalized state vector.
    pub fn generalized_dim(&self) -> usize {
        match self.kind {
            SystemKind::Pendulum => 2,
            SystemKind::DoublePendulum => 4,
            SystemKind::MassSpring => 4 * self.n_agents,
            SystemKind::Kuramoto => self.n_agents,
        }
    }
}

/// Classical fourth-order Runge–Kutta step.
pub fn rk4_step<F>(f: F, y: &[f64], dt: f64) -> Result<Vec<f64>, SimError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, SimError>,
{
    if !(dt > 0.0) {
        return Err(SimError::Config(format!("dt must be positive, got {dt}")));
    }
    let shifted = |k: &[f64], s: f64| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + s * b).collect() };
    let k1 = f(y)?;
    let k2 = f(&shifted(&k1, dt / 2.0))?;
    let k3 = f(&shifted(&k2, dt / 2.0))?;
    let k4 = f(&shifted(&k3, dt))?;
    let out: Vec<f64> = (0..y.len())
        .map(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFinite("rk4 step"));
    }
    Ok(out)
}

/// Time derivative of the generalized state.
///
/// Layouts: pendulum `[θ, θ̇]`; double pendulum `[θ1, θ2, θ̇1, θ̇2]`;
/// mass-spring `[r (N×2), v (N×2)]`; Kuramoto `[φ_1..φ_N]`.
pub fn system_derivative(kind: SystemKind, p: &SystemParams, y: &[f64]) -> Result<Vec<f64>, SimError> {
    let out = match kind {
        SystemKind::Pendulum => vec![y[1], -(p.g / p.l1) * y[0].sin()],
        SystemKind::DoublePendulum => {
            let (t1, t2, w1, w2) = (y[0], y[1], y[2], y[3]);
            let (s, c) = (t2 - t1).sin_cos();
            let m = p.m1 + p.m2;
            // [m l1, m2 l2 c; l1 c, l2] · [θ̈1, θ̈2] = rhs
            let a11 = m * p.l1;
            let a12 = p.m2 * p.l2 * c;
            let a21 = p.l1 * c;
            let a22 = p.l2;
            let r1 = p.m2 * p.l2 * w2 * w2 * s - m * p.g * t1.sin();
            let r2 = -p.l1 * w1 * w1 * s - p.g * t2.sin();
            let det = a11 * a22 - a12 * a21;
            if det.abs() < 1e-12 {
                return Err(SimError::Singular(det));
            }
            vec![w1, w2, (r1 * a22 - a12 * r2) / det, (a11 * r2 - a21 * r1) / det]
        }
        SystemKind::MassSpring => {
            let n = y.len() / 4;
            let (r, v) = y.split_at(2 * n);
            let mut out = vec![0.0; 4 * n];
            out[..2 * n].copy_from_slice(v);
            for i in 0..n {
                for j in 0..n {
                    let k = p.k[i * n + j];
                    if i != j && k != 0.0 {
                        for c in 0..2 {
                            out[2 * n + 2 * i + c] -= k * (r[2 * i + c] - r[2 * j + c]);
                        }
                    }
                }
            }
            out
        }
        SystemKind::Kuramoto => {
            let n = y.len();
            (0..n)
                .map(|i| {
                    p.omega[i]
                        + (0..n)
                            .filter(|&j| j != i)
                            .map(|j| p.k[i * n + j] * (y[i] - y[j]).sin())
                            .sum::<f64>()
                })
                .collect()
        }
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFinite("system derivative"));
    }
    Ok(out)
}

/// Total mechanical energy with potentials measured from their lowest point.
/// Not defined for Kuramoto.
pub fn energy(kind: SystemKind, p: &SystemParams, y: &[f64]) -> Option<f64> {
    match kind {
        SystemKind::Pendulum => Some(0.5 * p.l1 * p.l1 * y[1] * y[1] + p.g * p.l1 * (1.0 - y[0].cos())),
        SystemKind::DoublePendulum => {
            let (t1, t2, w1, w2) = (y[0], y[1], y[2], y[3]);
            let m = p.m1 + p.m2;
            let kin = 0.5 * m * p.l1 * p.l1 * w1 * w1
                + 0.5 * p.m2 * p.l2 * p.l2 * w2 * w2
                + p.m2 * p.l1 * p.l2 * w1 * w2 * (t1 - t2).cos();
            let pot = m * p.g * p.l1 * (1.0 - t1.cos()) + p.m2 * p.g * p.l2 * (1.0 - t2.cos());
            Some(kin + pot)
        }
        SystemKind::MassSpring => {
            let n = y.len() / 4;
            let (r, v) = y.split_at(2 * n);
            let kin = 0.5 * v.iter().map(|x| x * x).sum::<f64>();
            let mut pot = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    let d2 = (r[2 * i] - r[2 * j]).powi(2) + (r[2 * i + 1] - r[2 * j + 1]).powi(2);
                    pot += 0.5 * p.k[i * n + j] * d2;
                }
            }
            Some(kin + pot)
        }
        SystemKind::Kuramoto => None,
    }
}

/// Total linear momentum of a mass-spring state (unit masses).
pub fn momentum(y: &[f64]) -> [f64; 2] {
    let n = y.len() / 4;
    let v = &y[2 * n..];
    let mut m = [0.0; 2];
    for i in 0..n {
        m[0] += v[2 * i];
        m[1] += v[2 * i + 1];
    }
    m
}

/// Stored per-agent states `[agent][dim]` for a generalized state.
pub fn to_stored(kind: SystemKind, p: &SystemParams, y: &[f64]) -> Result<Vec<f64>, SimError> {
    Ok(match kind {
        SystemKind::Pendulum => {
            let (s, c) = y[0].sin_cos();
            vec![p.l1 * s, -p.l1 * c, p.l1 * c * y[1], p.l1 * s * y[1]]
        }
        SystemKind::DoublePendulum => {
            let (s1, c1) = y[0].sin_cos();
            let (s2, c2) = y[1].sin_cos();
            let (x1, y1) = (p.l1 * s1, -p.l1 * c1);
            let (vx1, vy1) = (p.l1 * c1 * y[2], p.l1 * s1 * y[2]);
            vec![
                x1,
                y1,
                vx1,
                vy1,
                x1 + p.l2 * s2,
                y1 - p.l2 * c2,
                vx1 + p.l2 * c2 * y[3],
                vy1 + p.l2 * s2 * y[3],
            ]
        }
        SystemKind::MassSpring => {
            let n = y.len() / 4;
            (0..n)
                .flat_map(|i| [y[2 * i], y[2 * i + 1], y[2 * n + 2 * i], y[2 * n + 2 * i + 1]])
                .collect()
        }
        SystemKind::Kuramoto => {
            let rate = system_derivative(kind, p, y)?;
            y.iter().zip(&rate).flat_map(|(a, b)| [*a, *b]).collect()
        }
    })
}

/// Keeps frames `0, factor, 2·factor, …`.
pub fn coarsen<T: Clone>(frames: &[T], factor: usize) -> Result<Vec<T>, SimError> {
    if factor == 0 || frames.len() % factor != 0 {
        return Err(SimError::Coarsen {
            factor,
            len: frames.len(),
        });
    }
    Ok(frames.iter().step_by(factor).cloned().collect())
}

/// Independent random stream for trajectory `index`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sample_coupling(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if let Some(k) = &cfg.coupling {
        return k.clone();
    }
    let n = cfg.n_agents;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(cfg.edge_prob) {
                k[i * n + j] = cfg.spring_k;
                k[j * n + i] = cfg.spring_k;
            }
        }
    }
    k
}

/// Draws the per-trajectory parameters and initial generalized state.
pub fn sample_initial(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> (SystemParams, Vec<f64>) {
    let mut params = cfg.physics.clone();
    let angle = Uniform::new_inclusive(-0.5 * PI, 0.5 * PI);
    let y0 = match cfg.kind {
        SystemKind::Pendulum => vec![angle.sample(rng), 0.0],
        SystemKind::DoublePendulum => vec![angle.sample(rng), angle.sample(rng), 0.0, 0.0],
        SystemKind::MassSpring => {
            params.k = sample_coupling(cfg, rng);
            let normal = Normal::new(0.0, cfg.ic_sigma).expect("positive sigma");
            (0..4 * cfg.n_agents).map(|_| normal.sample(rng)).collect()
        }
        SystemKind::Kuramoto => {
            params.k = sample_coupling(cfg, rng);
            params.omega = cfg.omega.clone().unwrap_or_else(|| {
                let u = Uniform::new(cfg.omega_range.0, cfg.omega_range.1);
                (0..cfg.n_agents).map(|_| u.sample(rng)).collect()
            });
            let normal = Normal::new(0.0, cfg.phase_sigma).expect("positive sigma");
            (0..cfg.n_agents).map(|_| normal.sample(rng)).collect()
        }
    };
    (params, y0)
}

/// Integrates `steps − 1` RK4 steps from `y0`, returning all `steps` generalized states.
pub fn integrate(cfg: &SimConfig, params: &SystemParams, y0: &[f64]) -> Result<Vec<Vec<f64>>, SimError> {
    let mut states = Vec::with_capacity(cfg.steps);
    states.push(y0.to_vec());
    for s in 1..cfg.steps {
        let next = rk4_step(|y| system_derivative(cfg.kind, params, y), &states[s - 1], cfg.dt)?;
        states.push(next);
    }
    Ok(states)
}

/// One stored trajectory `[frame][agent][dim]`.
pub fn simulate_trajectory(cfg: &SimConfig, params: &SystemParams, y0: &[f64]) -> Result<Vec<f64>, SimError> {
    let states = integrate(cfg, params, y0)?;
    let kept = coarsen(&states, cfg.coarsening)?;
    let mut out = Vec::with_capacity(kept.len() * cfg.n_agents * cfg.kind.state_dim());
    for y in &kept {
        out.extend(to_stored(cfg.kind, params, y)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub dataset: TrajectoryDataset,
    /// Trajectories discarded for non-finite values and drawn again.
    pub rejected: usize,
}

const MAX_ATTEMPTS: usize = 100;

/// Generates trajectories `first..first + n_traj` of the seed's stream family.
///
/// Every trajectory draws from its own substream, so the result does not
/// depend on thread count or scheduling.
pub fn generate_range(cfg: &SimConfig, name: &str, first: usize, n_traj: usize) -> Result<Generated, SimError> {
    cfg.validate()?;
    let per_traj: Vec<(Vec<f64>, usize)> = (first..first + n_traj)
        .into_par_iter()
        .map(|idx| {
            let mut rng = trajectory_rng(cfg.seed, idx as u64);
            for attempt in 0..MAX_ATTEMPTS {
                let (params, y0) = sample_initial(cfg, &mut rng);
                match simulate_trajectory(cfg, &params, &y0) {
                    Ok(t) => return Ok((t, attempt)),
                    Err(SimError::NonFinite(_)) | Err(SimError::Singular(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(SimError::NonFinite("every resampled trajectory"))
        })
        .collect::<Result<_, _>>()?;
    let rejected = per_traj.iter().map(|(_, r)| r).sum();
    if rejected > 0 {
        log::warn!("{name}: resampled {rejected} non-finite trajectories");
    }
    let data = per_traj.into_iter().flat_map(|(t, _)| t).collect();
    let dataset = TrajectoryDataset::new(name, cfg.frames(), cfg.n_agents, cfg.kind.state_dim(), cfg.dataset_dt(), data)?;
    Ok(Generated { dataset, rejected })
}

pub fn generate_dataset(cfg: &SimConfig, n_traj: usize) -> Result<Generated, SimError> {
    generate_range(cfg, cfg.kind.name(), 0, n_traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub const DESK: SplitSizes = SplitSizes { train: 2000, val: 500, test: 500 };
    pub const FULL: SplitSizes = SplitSizes { train: 50_000, val: 12_500, test: 12_500 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: TrajectoryDataset,
    pub val: TrajectoryDataset,
    pub test: TrajectoryDataset,
    pub rejected: usize,
}

/// Train, validation and test sets drawn from consecutive, disjoint substreams.
pub fn generate_splits(cfg: &SimConfig, sizes: SplitSizes) -> Result<Splits, SimError> {
    let base = cfg.kind.name();
    let train = generate_range(cfg, &format!("{base}_train"), 0, sizes.train)?;
    let val = generate_range(cfg, &format!("{base}_val"), sizes.train, sizes.val)?;
    let test = generate_range(cfg, &format!("{base}_test"), sizes.train + sizes.val, sizes.test)?;
    Ok(Splits {
        rejected: train.rejected + val.rejected + test.rejected,
        train: train.dataset,
        val: val.dataset,
        test: test.dataset,
    })
}
