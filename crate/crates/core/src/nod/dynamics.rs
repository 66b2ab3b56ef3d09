use nalgebra::{DMatrix, DVector};

use super::NodError;
use crate::diffcore::Activation;

/// Agent preferences, `N_a × N_o`.
pub type OpinionState = DMatrix<f64>;

/// Parameters of the multi-agent, multi-option opinion dynamics.
///
/// Self terms live in `alpha`; the diagonals of `a_o` and `a_a` must be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NodParams {
    /// Damping, `N_a × N_o`, nonnegative.
    pub d: DMatrix<f64>,
    /// Attention per agent, nonnegative.
    pub u: DVector<f64>,
    /// Self-reinforcement, `N_a × N_o`, nonnegative.
    pub alpha: DMatrix<f64>,
    /// Belief (inter-option) coupling, `N_o × N_o`.
    pub a_o: DMatrix<f64>,
    /// Communication (inter-agent) coupling, `N_a × N_a`.
    pub a_a: DMatrix<f64>,
    /// Environmental input, `N_a × N_o`.
    pub b: DMatrix<f64>,
    pub dt: f64,
}

impl NodParams {
    /// Uniform parameters with no coupling and no input.
    pub fn uniform(n_agents: usize, n_options: usize, d: f64, u: f64, alpha: f64, dt: f64) -> Self {
        Self {
            d: DMatrix::from_element(n_agents, n_options, d),
            u: DVector::from_element(n_agents, u),
            alpha: DMatrix::from_element(n_agents, n_options, alpha),
            a_o: DMatrix::zeros(n_options, n_options),
            a_a: DMatrix::zeros(n_agents, n_agents),
            b: DMatrix::zeros(n_agents, n_options),
            dt,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.d.nrows()
    }

    pub fn n_options(&self) -> usize {
        self.d.ncols()
    }

    pub fn validate(&self) -> Result<(), NodError> {
        let (na, no) = (self.n_agents(), self.n_options());
        let shapes = [
            ("alpha", self.alpha.shape(), (na, no)),
            ("b", self.b.shape(), (na, no)),
            ("a_o", self.a_o.shape(), (no, no)),
            ("a_a", self.a_a.shape(), (na, na)),
            ("u", (self.u.len(), 1), (na, 1)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(NodError::Shape {
                    what: name,
                    expected: want,
                    found: got,
                });
            }
        }
        if self.d.iter().chain(self.u.iter()).chain(self.alpha.iter()).any(|v| *v < 0.0) {
            return Err(NodError::InvalidParam("d, u and alpha must be nonnegative".into()));
        }
        if (0..no).any(|j| self.a_o[(j, j)] != 0.0) || (0..na).any(|i| self.a_a[(i, i)] != 0.0) {
            return Err(NodError::InvalidParam("a_o and a_a must have zero diagonals".into()));
        }
        if !(self.dt > 0.0) {
            return Err(NodError::InvalidParam(format!("dt must be positive, got {}", self.dt)));
        }
        let all = self
            .d
            .iter()
            .chain(self.u.iter())
            .chain(self.alpha.iter())
            .chain(self.a_o.iter())
            .chain(self.a_a.iter())
            .chain(self.b.iter());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(NodError::InvalidParam("parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Parameters of the decoupled single-option dynamics obtained from a
/// mutually exclusive pair of options.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedParams {
    pub d: DVector<f64>,
    pub u: DVector<f64>,
    pub alpha: DVector<f64>,
    /// `N_a × N_a`, zero diagonal.
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub dt: f64,
}

impl ReducedParams {
    pub fn single(d: f64, u: f64, alpha: f64, b: f64, dt: f64) -> Self {
        Self {
            d: DVector::from_element(1, d),
            u: DVector::from_element(1, u),
            alpha: DVector::from_element(1, alpha),
            a: DMatrix::zeros(1, 1),
            b: DVector::from_element(1, b),
            dt,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.d.len()
    }

    fn check(&self, z: &DVector<f64>) -> Result<(), NodError> {
        let n = self.n_agents();
        for (what, len) in [("z", z.len()), ("u", self.u.len()), ("alpha", self.alpha.len()), ("b", self.b.len())] {
            if len != n {
                return Err(NodError::Shape {
                    what,
                    expected: (n, 1),
                    found: (len, 1),
                });
            }
        }
        if self.a.shape() != (n, n) {
            return Err(NodError::Shape {
                what: "a",
                expected: (n, n),
                found: self.a.shape(),
            });
        }
        Ok(())
    }
}

/// Right-hand side of the full opinion dynamics for every (agent, option):
///
/// `ż_ij = −d_ij z_ij + S(u_i (α_ij z_ij + Σ_{k≠i} a^a_ik z_kj + Σ_{l≠j} a^o_jl z_il
///        + Σ_{k≠i} Σ_{l≠j} a^a_ik a^o_jl z_kl)) + b_ij`
///
/// With zero diagonals the four coupling sums collapse to
/// `α∘Z + A_a Z + Z A_oᵀ + A_a Z A_oᵀ`.
pub fn nod_rhs_full(z: &OpinionState, p: &NodParams, saturation: Activation) -> Result<DMatrix<f64>, NodError> {
    if z.shape() != p.d.shape() {
        return Err(NodError::Shape {
            what: "z",
            expected: p.d.shape(),
            found: z.shape(),
        });
    }
    p.validate()?;
    let social = &p.a_a * z;
    let arg = p.alpha.component_mul(z) + &social + z * p.a_o.transpose() + social * p.a_o.transpose();
    let mut out = -p.d.component_mul(z) + &p.b;
    for i in 0..z.nrows() {
        for j in 0..z.ncols() {
            out[(i, j)] += saturation.apply(p.u[i] * arg[(i, j)]);
        }
    }
    Ok(out)
}

/// Right-hand side of the reduced single-option dynamics:
/// `ż_i = −d_i z_i + S(u_i (α̃_i z_i + Σ_{k≠i} ã_ik z_k)) + b_i`.
pub fn nod_rhs_reduced(z: &DVector<f64>, p: &ReducedParams, saturation: Activation) -> Result<DVector<f64>, NodError> {
    p.check(z)?;
    let n = z.len();
    let mut out = DVector::zeros(n);
    for i in 0..n {
        let coupling: f64 = (0..n).filter(|&k| k != i).map(|k| p.a[(i, k)] * z[k]).sum();
        let arg = p.alpha[i] * z[i] + coupling;
        out[i] = -p.d[i] * z[i] + saturation.apply(p.u[i] * arg) + p.b[i];
    }
    Ok(out)
}

/// One explicit Euler step `z + rhs(z)·dt`.
pub fn euler_step<F>(z: &[f64], dt: f64, rhs: F) -> Result<Vec<f64>, NodError>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(dt > 0.0) {
        return Err(NodError::InvalidParam(format!("dt must be positive, got {dt}")));
    }
    let dz = rhs(z);
    let next: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + b * dt).collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(NodError::NonFinite { step: 0 });
    }
    Ok(next)
}

/// Euler trajectory of the full dynamics, `steps + 1` frames including `z0`.
pub fn simulate_full(
    z0: &OpinionState,
    p: &NodParams,
    saturation: Activation,
    steps: usize,
) -> Result<Vec<OpinionState>, NodError> {
    let mut frames = Vec::with_capacity(steps + 1);
    frames.push(z0.clone());
    for step in 0..steps {
        let z = &frames[step];
        let next = z + nod_rhs_full(z, p, saturation)? * p.dt;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(NodError::NonFinite { step: step + 1 });
        }
        frames.push(next);
    }
    Ok(frames)
}

/// Euler trajectory of the reduced dynamics, `steps + 1` frames including `z0`.
pub fn simulate_reduced(
    z0: &DVector<f64>,
    p: &ReducedParams,
    saturation: Activation,
    steps: usize,
) -> Result<Vec<DVector<f64>>, NodError> {
    let mut frames = Vec::with_capacity(steps + 1);
    frames.push(z0.clone());
    for step in 0..steps {
        let z = &frames[step];
        let next = z + nod_rhs_reduced(z, p, saturation)? * p.dt;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(NodError::NonFinite { step: step + 1 });
        }
        frames.push(next);
    }
    Ok(frames)
}

/// Supercritical pitchfork normal form `ż = u z − z³`.
pub fn pitchfork_rhs(z: f64, u: f64) -> f64 {
    u * z - z * z * z
}

/// Decouples a mutually exclusive pair of options (`N_o = 2`) into the
/// single-option dynamics for option 1.
///
/// With `z_i2 = −c z_i1` the belief term `a^o_12 z_i2` becomes
/// `−c a^o_12 z_i1`, giving `α̃_i = α_i1 − c a^o_12` and
/// `ã_ik = a^a_ik (1 − c a^o_12)`. Damping, attention and input are taken
/// from option 1.
pub fn reduce_params(p: &NodParams, c: f64) -> Result<ReducedParams, NodError> {
    p.validate()?;
    if p.n_options() != 2 {
        return Err(NodError::InvalidParam(format!(
            "reduction needs exactly two options, got {}",
            p.n_options()
        )));
    }
    if !(c > 0.0) {
        return Err(NodError::InvalidParam(format!("scale c must be positive, got {c}")));
    }
    let (a12, a21) = (p.a_o[(0, 1)], p.a_o[(1, 0)]);
    if a12 > 0.0 || a21 > 0.0 {
        return Err(NodError::SignPrecondition { a12, a21 });
    }
    let factor = 1.0 - c * a12;
    let n = p.n_agents();
    let mut a = &p.a_a * factor;
    for i in 0..n {
        a[(i, i)] = 0.0;
    }
    Ok(ReducedParams {
        d: p.d.column(0).into_owned(),
        u: p.u.clone(),
        alpha: p.alpha.column(0).map(|v| v - c * a12),
        a,
        b: p.b.column(0).into_owned(),
        dt: p.dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct quadruple-loop evaluation of the full right-hand side.
    fn scalar_loop(z: &DMatrix<f64>, p: &NodParams) -> DMatrix<f64> {
        let (na, no) = z.shape();
        DMatrix::from_fn(na, no, |i, j| {
            let mut arg = p.alpha[(i, j)] * z[(i, j)];
            for k in (0..na).filter(|&k| k != i) {
                arg += p.a_a[(i, k)] * z[(k, j)];
            }
            for l in (0..no).filter(|&l| l != j) {
                arg += p.a_o[(j, l)] * z[(i, l)];
            }
            for k in (0..na).filter(|&k| k != i) {
                for l in (0..no).filter(|&l| l != j) {
                    arg += p.a_a[(i, k)] * p.a_o[(j, l)] * z[(k, l)];
                }
            }
            -p.d[(i, j)] * z[(i, j)] + (p.u[i] * arg).tanh() + p.b[(i, j)]
        })
    }

    fn ones_offdiag(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
    }

    #[test]
    fn origin_is_equilibrium_without_input() {
        let mut p = NodParams::uniform(3, 2, 0.7, 2.0, 1.3, 0.1);
        p.a_o = DMatrix::from_row_slice(2, 2, &[0.0, -0.4, 0.9, 0.0]);
        p.a_a = ones_offdiag(3) * 0.3;
        let out = nod_rhs_full(&DMatrix::zeros(3, 2), &p, Activation::Tanh).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_attention_leaves_linear_decay() {
        let mut p = NodParams::uniform(2, 2, 0.5, 0.0, 1.0, 0.1);
        p.a_a = ones_offdiag(2);
        p.b = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, -0.3, 0.4]);
        let z = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 3.0, 0.5]);
        let out = nod_rhs_full(&z, &p, Activation::Tanh).unwrap();
        let expect = -p.d.component_mul(&z) + &p.b;
        assert!((out - expect).abs().max() < 1e-15);
    }

    #[test]
    fn two_by_two_matches_scalar_loop() {
        let mut p = NodParams::uniform(2, 2, 1.0, 1.0, 1.0, 0.1);
        p.a_a = ones_offdiag(2);
        p.a_o = ones_offdiag(2);
        let z = DMatrix::from_row_slice(2, 2, &[0.1, -0.1, 0.2, -0.2]);
        let out = nod_rhs_full(&z, &p, Activation::Tanh).unwrap();
        let oracle = scalar_loop(&z, &p);
        assert!((&out - &oracle).abs().max() < 1e-15);
        // agent 0, option 0: arg = 0.1 + 0.2 + (-0.1) + (-0.2) = 0 → ż = −0.1
        assert!((out[(0, 0)] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = NodParams::uniform(2, 2, 1.0, 1.0, 1.0, 0.1);
        p.a_o[(0, 0)] = 1.0;
        assert!(p.validate().is_err());
        let mut p = NodParams::uniform(2, 2, 1.0, 1.0, 1.0, 0.1);
        p.u[0] = -1.0;
        assert!(p.validate().is_err());
        let p = NodParams::uniform(2, 2, 1.0, 1.0, 1.0, 0.1);
        assert!(matches!(
            nod_rhs_full(&DMatrix::zeros(3, 2), &p, Activation::Tanh),
            Err(NodError::Shape { .. })
        ));
    }

    #[test]
    fn reduced_single_agent_hand_value() {
        let p = ReducedParams::single(1.0, 1.0, 2.0, 0.0, 0.1);
        let out = nod_rhs_reduced(&DVector::from_element(1, 0.5), &p, Activation::Tanh).unwrap();
        assert!((out[0] - (-0.5 + 1.0f64.tanh())).abs() < 1e-15);
        let zero = nod_rhs_reduced(&DVector::zeros(1), &p, Activation::Tanh).unwrap();
        assert_eq!(zero[0], 0.0);
    }

    #[test]
    fn euler_examples() {
        assert_eq!(euler_step(&[1.0, 2.0], 0.1, |z| vec![0.0; z.len()]).unwrap(), vec![1.0, 2.0]);
        let next = euler_step(&[1.0], 0.1, |z| vec![-z[0]]).unwrap();
        assert!((next[0] - 0.9).abs() < 1e-15);
        assert!(euler_step(&[1.0], 0.0, |z| z.to_vec()).is_err());
        assert!(euler_step(&[1.0], 0.1, |_| vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn euler_error_is_first_order() {
        // 100 steps at dt against a dt/100 reference; halving dt halves the gap
        let gap = |dt: f64| {
            let p = ReducedParams::single(1.0, 0.5, 1.0, 0.2, dt);
            let coarse = simulate_reduced(&DVector::from_element(1, 0.8), &p, Activation::Tanh, 100).unwrap();
            let fine_p = ReducedParams { dt: dt / 100.0, ..p };
            let fine = simulate_reduced(&DVector::from_element(1, 0.8), &fine_p, Activation::Tanh, 10_000).unwrap();
            (coarse[100][0] - fine[10_000][0]).abs()
        };
        let (g1, g2) = (gap(0.02), gap(0.01));
        assert!(g1 < 0.02, "gap {g1}");
        let ratio = g1 / g2;
        assert!((1.6..2.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn pitchfork_values() {
        assert_eq!(pitchfork_rhs(0.0, 3.0), 0.0);
        assert_eq!(pitchfork_rhs(1.0, 1.0), 0.0);
        assert_eq!(pitchfork_rhs(1.0, 4.0), 3.0);
    }

    #[test]
    fn reduce_params_examples() {
        let mut p = NodParams::uniform(2, 2, 1.0, 1.0, 1.0, 0.1);
        p.a_a = ones_offdiag(2) * 0.5;
        let r = reduce_params(&p, 1.0).unwrap();
        assert_eq!(r.alpha, p.alpha.column(0).into_owned());
        assert_eq!(r.a, p.a_a);

        p.a_o = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        let r = reduce_params(&p, 1.0).unwrap();
        assert!(r.alpha.iter().all(|v| (*v - 2.0).abs() < 1e-15));
        assert!((r.a[(0, 1)] - 1.0).abs() < 1e-15 && r.a[(0, 0)] == 0.0);

        p.a_o[(1, 0)] = 0.3;
        assert!(matches!(reduce_params(&p, 1.0), Err(NodError::SignPrecondition { .. })));
        p.a_o[(1, 0)] = -0.3;
        assert!(reduce_params(&p, 0.0).is_err());
    }
}
