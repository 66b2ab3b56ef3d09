use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CommVariant, ModelConfig, ModelError};
use crate::diffcore::{inverse_softplus, softplus, Activation, Tape, Tensor, Var};

/// Initial values of the mapped intrinsic parameters.
pub const INIT_DAMPING: f64 = 0.5;
pub const INIT_ATTENTION: f64 = 1.0;
pub const INIT_SELF_REINFORCEMENT: f64 = 0.5;

/// The nine MLPs, in parameter order.
pub const MLP_NAMES: [&str; 9] = [
    "ez.emb", "ez.v2e", "ez.e2v", "eb.emb", "eb.v2e", "eb.e2v", "dx.dec", "dx.v2e", "dx.e2v",
];

const RHO_D: usize = 54;
const RHO_U: usize = 55;
const RHO_ALPHA: usize = 56;
const A_O: usize = 57;
const A_PRE: usize = 58;

/// Which message-passing network a pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Net {
    Preference,
    EnvInput,
    Decoder,
}

impl Net {
    fn first_mlp(self) -> usize {
        match self {
            Self::Preference => 0,
            Self::EnvInput => 3,
            Self::Decoder => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Learned parameters plus structure. Parameters are kept in one ordered list:
/// nine 3-layer MLPs (`W1, b1, W2, b2, W3, b3` each), then `rho_d`, `rho_u`,
/// `rho_alpha`, the off-diagonal belief entries, and, for the learned
/// multiplier variant, the off-diagonal multiplier entries.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnModel {
    pub config: ModelConfig,
    pub params: Vec<Param>,
}

/// Parameter leaves of one model on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    a_o_t: Option<Var>,
    a_pre: Option<Var>,
    off_diag_mask: Option<Var>,
}

fn off_diag_index(n: usize, r: usize, c: usize) -> usize {
    r * (n - 1) + if c < r { c } else { c - 1 }
}

/// Places a vector of off-diagonal entries (row-major, diagonal skipped) into
/// an `n × n` matrix with zero diagonal, transposed when asked.
fn place_off_diag(tape: &mut Tape, entries: Var, n: usize, transpose: bool) -> Result<Var, ModelError> {
    let m = n * (n - 1);
    let row = tape.reshape(entries, vec![1, m])?;
    let zero = tape.leaf(Tensor::zeros(&[1, 1]))?;
    let ext = tape.concat(row, zero)?;
    let col = tape.reshape(ext, vec![m + 1, 1])?;
    let index: Arc<[usize]> = (0..n * n)
        .map(|k| {
            let (r, c) = (k / n, k % n);
            let (r, c) = if transpose { (c, r) } else { (r, c) };
            if r == c {
                m
            } else {
                off_diag_index(n, r, c)
            }
        })
        .collect::<Vec<_>>()
        .into();
    let g = tape.gather_rows(col, index)?;
    Ok(tape.reshape(g, vec![n, n])?)
}

/// Edge lists of the fully connected graph on every group of `n` rows:
/// for agent `i`, neighbours `k ≠ i` in increasing order.
fn edges(groups: usize, n: usize) -> (Arc<[usize]>, Arc<[usize]>) {
    let mut src = Vec::with_capacity(groups * n * (n - 1));
    let mut dst = Vec::with_capacity(groups * n * (n - 1));
    for g in 0..groups {
        for i in 0..n {
            for k in (0..n).filter(|&k| k != i) {
                src.push(g * n + i);
                dst.push(g * n + k);
            }
        }
    }
    (src.into(), dst.into())
}

fn uniform_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

impl BinnModel {
    /// Fresh model: MLP weights `U(±1/√fan_in)`, zero biases, intrinsic
    /// parameters at the softplus preimages of the initial values, belief
    /// entries `N(0, 0.1)`, multiplier entries one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, no, na) = (config.state_dim, config.hidden, config.n_options, config.n_agents);
        let shapes: [(usize, usize, usize); 9] = [
            (d, h, h),
            (2 * h, h, h),
            (2 * h, h, no),
            (d, h, h),
            (2 * h, h, h),
            (2 * h, h, no),
            (no, h, h),
            (2 * h, h, h),
            (2 * h, h, d),
        ];
        let mut params = Vec::new();
        for (name, (input, hidden, out)) in MLP_NAMES.iter().zip(shapes) {
            for (layer, (r, c)) in [(input, hidden), (hidden, hidden), (hidden, out)].into_iter().enumerate() {
                params.push(Param {
                    name: format!("{name}.w{}", layer + 1),
                    value: uniform_tensor(&mut rng, r, c),
                });
                params.push(Param {
                    name: format!("{name}.b{}", layer + 1),
                    value: Tensor::zeros(&[c]),
                });
            }
        }
        let filled = |v: f64, n: usize| Tensor::vector(vec![v; n]);
        params.push(Param { name: "rho_d".into(), value: filled(inverse_softplus(INIT_DAMPING), no) });
        params.push(Param { name: "rho_u".into(), value: filled(inverse_softplus(INIT_ATTENTION), 1) });
        params.push(Param { name: "rho_alpha".into(), value: filled(inverse_softplus(INIT_SELF_REINFORCEMENT), no) });
        let normal = Normal::new(0.0, 0.1).expect("positive sigma");
        params.push(Param {
            name: "a_o".into(),
            value: Tensor::vector((0..no * (no - 1)).map(|_| normal.sample(&mut rng)).collect()),
        });
        if config.comm == CommVariant::LearnedMultiplier {
            params.push(Param { name: "a_pre".into(), value: filled(1.0, na * (na - 1)) });
        }
        Ok(Self { config, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Mapped `(d, u, α)`.
    pub fn intrinsics(&self) -> (Vec<f64>, f64, Vec<f64>) {
        let map = |i: usize| self.params[i].value.data().iter().map(|v| softplus(*v)).collect::<Vec<_>>();
        (map(RHO_D), map(RHO_U)[0], map(RHO_ALPHA))
    }

    /// Belief matrix `A_o` with its structural zero diagonal.
    pub fn belief_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.config.n_options;
        let e = self.params[A_O].value.data();
        (0..n)
            .map(|r| (0..n).map(|c| if r == c { 0.0 } else { e[off_diag_index(n, r, c)] }).collect())
            .collect()
    }

    /// Learned multiplier matrix (learned-multiplier variant only).
    pub fn multiplier_matrix(&self) -> Option<Vec<Vec<f64>>> {
        let n = self.config.n_agents;
        self.params.get(A_PRE).map(|p| {
            (0..n)
                .map(|r| (0..n).map(|c| if r == c { 0.0 } else { p.value.data()[off_diag_index(n, r, c)] }).collect())
                .collect()
        })
    }

    /// Records every parameter as a leaf, plus the derived structural matrices.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound, ModelError> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        self.bind_vars(tape, vars)
    }

    /// As [`BinnModel::bind`] for parameter leaves the caller already
    /// recorded, in parameter order.
    pub fn bind_vars(&self, tape: &mut Tape, vars: Vec<Var>) -> Result<Bound, ModelError> {
        if vars.len() != self.params.len() {
            return Err(ModelError::Config(format!("{} parameter leaves for {} parameters", vars.len(), self.params.len())));
        }
        let (no, na) = (self.config.n_options, self.config.n_agents);
        let a_o_t = if no > 1 { Some(place_off_diag(tape, vars[A_O], no, true)?) } else { None };
        let a_pre = if self.config.comm == CommVariant::LearnedMultiplier && na > 1 {
            Some(place_off_diag(tape, vars[A_PRE], na, false)?)
        } else {
            None
        };
        let off_diag_mask = if self.config.comm == CommVariant::InverseDistance && na > 1 {
            let mask = (0..na * na).map(|k| if k / na == k % na { 0.0 } else { 1.0 }).collect();
            Some(tape.leaf(Tensor::matrix(na, na, mask))?)
        } else {
            None
        };
        Ok(Bound { vars, a_o_t, a_pre, off_diag_mask })
    }

    fn mlp(&self, tape: &mut Tape, b: &Bound, mlp: usize, x: Var) -> Result<Var, ModelError> {
        let p = &b.vars[mlp * 6..mlp * 6 + 6];
        let act = self.config.activation;
        let h = tape.linear(x, p[0], p[1])?;
        let h = tape.activation(h, act)?;
        let h = tape.linear(h, p[2], p[3])?;
        let h = tape.activation(h, act)?;
        Ok(tape.linear(h, p[4], p[5])?)
    }

    fn check_rows(&self, tape: &Tape, x: Var, cols: usize) -> Result<usize, ModelError> {
        let v = tape.value(x);
        let n = self.config.n_agents;
        if v.shape().len() != 2 || v.cols() != cols || v.rows() % n != 0 {
            return Err(ModelError::Shape {
                expected: format!("rows a multiple of {n}, {cols} columns"),
                found: v.shape().to_vec(),
            });
        }
        Ok(v.rows() / n)
    }

    /// One message-passing network over groups of `n_agents` consecutive rows:
    /// `h_i = f1(x_i)`, `m_ik = f2([h_i, h_k])`, `out_i = f3([Σ_k m_ik, h_i])`.
    pub fn message_pass(&self, tape: &mut Tape, b: &Bound, net: Net, x: Var) -> Result<Var, ModelError> {
        let input = match net {
            Net::Decoder => self.config.n_options,
            _ => self.config.state_dim,
        };
        let groups = self.check_rows(tape, x, input)?;
        let first = net.first_mlp();
        let (n, hd) = (self.config.n_agents, self.config.hidden);
        let h = self.mlp(tape, b, first, x)?;
        let msum = if n == 1 {
            tape.leaf(Tensor::zeros(&[groups, hd]))?
        } else {
            // f2's first layer split by input half, so each node is
            // projected once and edges only gather and add.
            let p = &b.vars[(first + 1) * 6..(first + 1) * 6 + 6];
            let act = self.config.activation;
            let w_src = tape.slice_rows(p[0], 0, hd)?;
            let w_dst = tape.slice_rows(p[0], hd, hd)?;
            let hs = tape.matmul(h, w_src)?;
            let hk = tape.matmul(h, w_dst)?;
            let (src, dst) = edges(groups, n);
            let es = tape.gather_rows(hs, src)?;
            let ek = tape.gather_rows(hk, dst)?;
            let e = tape.add(es, ek)?;
            let e = tape.add_tiled(e, p[1])?;
            let e = tape.activation(e, act)?;
            let e = tape.linear(e, p[2], p[3])?;
            let e = tape.activation(e, act)?;
            // Σ_k (e_k W3 + b3) = (Σ_k e_k) W3 + (n − 1) b3
            let s = tape.sum_blocks(e, n - 1)?;
            let s = tape.matmul(s, p[4])?;
            let bias = tape.scale(p[5], (n - 1) as f64)?;
            tape.add_tiled(s, bias)?
        };
        let cat = tape.concat(msum, h)?;
        self.mlp(tape, b, first + 2, cat)
    }

    pub fn encode_z(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var, ModelError> {
        self.message_pass(tape, b, Net::Preference, x)
    }

    pub fn encode_b(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var, ModelError> {
        self.message_pass(tape, b, Net::EnvInput, x)
    }

    pub fn decode(&self, tape: &mut Tape, b: &Bound, z: Var) -> Result<Var, ModelError> {
        self.message_pass(tape, b, Net::Decoder, z)
    }

    /// Communication blocks, stacked `rows × n_agents`, from the position half of `x`.
    /// `None` for a single agent (no coupling).
    pub fn comm(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Option<Var>, ModelError> {
        let n = self.config.n_agents;
        self.check_rows(tape, x, self.config.state_dim)?;
        if n == 1 {
            return Ok(None);
        }
        let pos = tape.slice_cols(x, 0, self.config.state_dim / 2)?;
        let d2 = tape.pair_sq_dist(pos, n)?;
        let a = match self.config.comm {
            CommVariant::SquaredDistance => d2,
            CommVariant::InverseDistance | CommVariant::LearnedMultiplier => {
                let shifted = tape.add_const(d2, self.config.eps)?;
                let inv = tape.recip(shifted)?;
                let mask = b.a_pre.or(b.off_diag_mask).expect("bound for this variant");
                tape.mul_tiled(inv, mask)?
            }
        };
        Ok(Some(a))
    }

    /// Latent opinion dynamics for stacked agent rows:
    /// `−d∘z + tanh(u (α∘z + A_a z + z A_oᵀ + A_a z A_oᵀ)) + b`.
    pub fn nod(&self, tape: &mut Tape, bound: &Bound, z: Var, b: Var, a: Option<Var>) -> Result<Var, ModelError> {
        let v = &bound.vars;
        let d = tape.softplus(v[RHO_D])?;
        let u = tape.softplus(v[RHO_U])?;
        let alpha = tape.softplus(v[RHO_ALPHA])?;
        // y = (I + A_a) z ; w = y (I + A_oᵀ)
        let y = match a {
            Some(a) => {
                let az = tape.block_matmul(a, z)?;
                tape.add(z, az)?
            }
            None => z,
        };
        let w = match bound.a_o_t {
            Some(t) => {
                let ya = tape.matmul(y, t)?;
                tape.add(y, ya)?
            }
            None => y,
        };
        let coupled = tape.sub(w, z)?;
        let selfr = tape.mul_tiled(z, alpha)?;
        let arg = tape.add(coupled, selfr)?;
        let arg = tape.mul_scalar(arg, u)?;
        let s = tape.tanh(arg)?;
        let damp = tape.mul_tiled(z, d)?;
        let out = tape.sub(s, damp)?;
        Ok(tape.add(out, b)?)
    }

    /// Unrolls `horizon` latent Euler steps from `x0`, decoding each state and
    /// re-encoding the environmental input and communication matrix from the
    /// prediction. `truth`, when given, supplies per-step `(b_t, A_t)` instead.
    pub fn rollout_vars(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        start: RolloutStart,
        horizon: usize,
        truth: Option<&[(Var, Option<Var>)]>,
    ) -> Result<RolloutVars, ModelError> {
        if horizon == 0 {
            return Err(ModelError::Config("rollout horizon must be at least 1".into()));
        }
        let mut out = RolloutVars {
            x_hat: Vec::with_capacity(horizon),
            z: vec![start.z],
            b: vec![start.b],
            a: vec![start.a],
        };
        let dt = self.config.dt;
        for step in 0..horizon {
            let diverged = |e: ModelError| match e {
                ModelError::Diff(source) => ModelError::Diverged { step: step + 1, source },
                other => other,
            };
            let (b_t, a_t) = match truth {
                Some(tr) => tr[step],
                None => (out.b[step], out.a[step]),
            };
            let z_t = out.z[step];
            let dz = self.nod(tape, bound, z_t, b_t, a_t).map_err(diverged)?;
            let dz = tape.scale(dz, dt).map_err(|e| diverged(e.into()))?;
            let z_next = tape.add(z_t, dz).map_err(|e| diverged(e.into()))?;
            let x_next = self.decode(tape, bound, z_next).map_err(diverged)?;
            out.z.push(z_next);
            out.x_hat.push(x_next);
            if truth.is_none() {
                let b_next = self.encode_b(tape, bound, x_next).map_err(diverged)?;
                let a_next = self.comm(tape, bound, x_next).map_err(diverged)?;
                out.b.push(b_next);
                out.a.push(a_next);
            }
        }
        Ok(out)
    }

    fn start_from(&self, tape: &mut Tape, bound: &Bound, x0: Var) -> Result<RolloutStart, ModelError> {
        Ok(RolloutStart {
            z: self.encode_z(tape, bound, x0)?,
            b: self.encode_b(tape, bound, x0)?,
            a: self.comm(tape, bound, x0)?,
        })
    }

    fn with_input<T>(&self, x: &Tensor, f: impl FnOnce(&mut Tape, &Bound, Var) -> Result<T, ModelError>) -> Result<T, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let xv = tape.leaf(x.clone())?;
        f(&mut tape, &bound, xv)
    }

    /// Preferences for stacked agent states (`rows × state_dim`).
    pub fn encode_preferences(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.with_input(x, |t, b, xv| {
            let out = self.encode_z(t, b, xv)?;
            Ok(t.value(out).clone())
        })
    }

    pub fn encode_env_input(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.with_input(x, |t, b, xv| {
            let out = self.encode_b(t, b, xv)?;
            Ok(t.value(out).clone())
        })
    }

    /// States for stacked preferences (`rows × n_options`).
    pub fn decode_states(&self, z: &Tensor) -> Result<Tensor, ModelError> {
        self.with_input(z, |t, b, zv| {
            let out = self.decode(t, b, zv)?;
            Ok(t.value(out).clone())
        })
    }

    /// Stacked communication blocks for stacked agent states.
    pub fn comm_matrix(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let rows = x.rows();
        let n = self.config.n_agents;
        self.with_input(x, |t, b, xv| {
            Ok(match self.comm(t, b, xv)? {
                Some(a) => t.value(a).clone(),
                None => Tensor::zeros(&[rows, n]),
            })
        })
    }

    /// Latent right-hand side for given preferences, inputs and communication blocks.
    pub fn f_nod_latent(&self, z: &Tensor, b: &Tensor, a: Option<&Tensor>) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let zv = tape.leaf(z.clone())?;
        let bv = tape.leaf(b.clone())?;
        let av = a.map(|a| tape.leaf(a.clone())).transpose()?;
        let out = self.nod(&mut tape, &bound, zv, bv, av)?;
        Ok(tape.value(out).clone())
    }

    /// Predicted states for frames `1..=horizon` and the latent trace
    /// (frames `0..=horizon`) from stacked initial states.
    pub fn rollout(&self, x0: &Tensor, horizon: usize) -> Result<(Vec<Tensor>, LatentTrace), ModelError> {
        let rows = x0.rows();
        let n = self.config.n_agents;
        self.with_input(x0, |t, bound, xv| {
            let start = self.start_from(t, bound, xv)?;
            let r = self.rollout_vars(t, bound, start, horizon, None)?;
            let val = |v: Var| t.value(v).clone();
            let trace = LatentTrace {
                z: r.z.iter().map(|v| val(*v)).collect(),
                b: r.b.iter().map(|v| val(*v)).collect(),
                a: r.a.iter().map(|v| v.map_or_else(|| Tensor::zeros(&[rows, n]), val)).collect(),
            };
            Ok((r.x_hat.iter().map(|v| val(*v)).collect(), trace))
        })
    }

    /// Encoder preferences and inputs for every frame of one observed
    /// trajectory, `frames` blocks of `n_agents × n_options`.
    pub fn encode_trajectory(&self, frames: &[f64], n_frames: usize) -> Result<(Vec<Tensor>, Vec<Tensor>), ModelError> {
        let (n, d) = (self.config.n_agents, self.config.state_dim);
        if frames.len() != n_frames * n * d {
            return Err(ModelError::Shape {
                expected: format!("{n_frames} frames of {n} × {d}"),
                found: vec![frames.len()],
            });
        }
        let x = Tensor::matrix(n_frames * n, d, frames.to_vec());
        let z = self.encode_preferences(&x)?;
        let b = self.encode_env_input(&x)?;
        let split = |t: &Tensor| {
            t.data()
                .chunks(n * t.cols())
                .map(|c| Tensor::matrix(n, t.cols(), c.to_vec()))
                .collect()
        };
        Ok((split(&z), split(&b)))
    }

    /// Parameter-wise structural check used by loaders.
    pub fn expected_manifest(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
        Ok(Self::new(config.clone(), 0)?
            .params
            .into_iter()
            .map(|p| (p.name, p.value.shape().to_vec()))
            .collect())
    }
}

/// Initial latent state, input and communication of a rollout.
#[derive(Debug, Clone, Copy)]
pub struct RolloutStart {
    pub z: Var,
    pub b: Var,
    pub a: Option<Var>,
}

impl RolloutStart {
    pub fn encode(model: &BinnModel, tape: &mut Tape, bound: &Bound, x0: Var) -> Result<Self, ModelError> {
        model.start_from(tape, bound, x0)
    }
}

#[derive(Debug, Clone)]
pub struct RolloutVars {
    /// Predictions for frames `1..=horizon`.
    pub x_hat: Vec<Var>,
    pub z: Vec<Var>,
    pub b: Vec<Var>,
    pub a: Vec<Option<Var>>,
}

/// Latent quantities along a rollout, each entry stacked `rows × ·`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrace {
    pub z: Vec<Tensor>,
    pub b: Vec<Tensor>,
    pub a: Vec<Tensor>,
}

/// Activation used by the opinion-dynamics saturation.
pub const SATURATION: Activation = Activation::Tanh;
