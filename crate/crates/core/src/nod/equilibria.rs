use std::io;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::NodError;

/// Tuning for [`find_equilibria`] and [`hysteresis_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSearch {
    /// Convergence threshold on `‖rhs‖∞`.
    pub tol: f64,
    /// Forward-integration step cap per start point.
    pub max_steps: usize,
    /// Forward-integration (explicit Euler) step.
    pub step: f64,
    pub newton_iters: usize,
    /// Central-difference step for Jacobians.
    pub jacobian_h: f64,
    /// Roots closer than this (sup norm) are the same equilibrium.
    pub merge_tol: f64,
    /// Leading eigenvalues with `|Re λ|` below this count as marginal.
    pub marginal_tol: f64,
}

impl Default for EquilibriumSearch {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_steps: 1_000_000,
            step: 1e-2,
            newton_iters: 100,
            jacobian_h: 1e-6,
            merge_tol: 1e-6,
            marginal_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub z: Vec<f64>,
    pub stable: bool,
    /// Largest real part among the Jacobian eigenvalues.
    pub leading_real: f64,
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn jacobian<F>(rhs: &F, z: &[f64], h: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = z.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut work = z.to_vec();
    for c in 0..n {
        work[c] = z[c] + h;
        let plus = rhs(&work);
        work[c] = z[c] - h;
        let minus = rhs(&work);
        work[c] = z[c];
        for r in 0..n {
            jac[(r, c)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
    jac
}

fn leading_real_part(jac: &DMatrix<f64>) -> f64 {
    if jac.nrows() == 1 {
        return jac[(0, 0)];
    }
    jac.complex_eigenvalues()
        .iter()
        .map(|c| c.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Euler integration until `‖rhs‖∞ < tol`; `None` when the cap is hit or
/// the state blows up.
fn integrate_to_rest<F>(rhs: &F, start: &[f64], search: &EquilibriumSearch) -> Option<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut z = start.to_vec();
    for _ in 0..search.max_steps {
        let dz = rhs(&z);
        if sup_norm(&dz) < search.tol {
            return Some(z);
        }
        for (a, b) in z.iter_mut().zip(&dz) {
            *a += search.step * b;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return None;
        }
    }
    None
}

fn newton<F>(rhs: &F, start: &[f64], search: &EquilibriumSearch) -> Option<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    // Keeps iterating past the tolerance so slowly converging (degenerate)
    // roots collapse onto one point before merging.
    let mut z = start.to_vec();
    for _ in 0..search.newton_iters {
        let f = rhs(&z);
        if f.iter().all(|v| *v == 0.0) {
            return Some(z);
        }
        let jac = jacobian(rhs, &z, search.jacobian_h);
        let Some(delta) = jac.lu().solve(&DVector::from_vec(f)) else {
            break;
        };
        for (a, d) in z.iter_mut().zip(delta.iter()) {
            *a -= d;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return None;
        }
        if sup_norm(delta.as_slice()) <= 1e-14 * (1.0 + sup_norm(&z)) {
            break;
        }
    }
    (sup_norm(&rhs(&z)) < search.tol).then_some(z)
}

/// Locates the equilibria of `ż = rhs(z)` reachable from a set of start points.
///
/// Every start point is integrated forward (which only settles on stable
/// equilibria) and separately used as a Newton seed (which also finds
/// unstable ones). Converged points are Newton-polished, merged, and
/// classified by the leading real part of a central-difference Jacobian.
/// Nonhyperbolic points (`|Re λ| < marginal_tol`) are reported stable.
pub fn find_equilibria<F>(rhs: F, grid: &[Vec<f64>], search: &EquilibriumSearch) -> Result<Vec<Equilibrium>, NodError>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(search.tol > 0.0) {
        return Err(NodError::InvalidParam(format!("tolerance must be positive, got {}", search.tol)));
    }
    let mut roots: Vec<Vec<f64>> = Vec::new();
    let mut push = |z: Vec<f64>| {
        if !roots.iter().any(|r| {
            r.iter().zip(&z).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) < search.merge_tol
        }) {
            roots.push(z);
        }
    };
    for start in grid {
        if let Some(rest) = integrate_to_rest(&rhs, start, search) {
            push(newton(&rhs, &rest, search).unwrap_or(rest));
        }
        if let Some(root) = newton(&rhs, start, search) {
            push(root);
        }
    }
    if roots.is_empty() {
        return Err(NodError::NoConvergence {
            context: format!("no equilibrium reached from {} start points", grid.len()),
        });
    }
    let mut out: Vec<Equilibrium> = roots
        .into_iter()
        .map(|z| {
            let leading_real = leading_real_part(&jacobian(&rhs, &z, search.jacobian_h));
            Equilibrium {
                stable: leading_real < search.marginal_tol,
                leading_real,
                z,
            }
        })
        .collect();
    out.sort_by(|a, b| a.z.partial_cmp(&b.z).unwrap_or(std::cmp::Ordering::Equal));
    Ok(out)
}

/// `n` evenly spaced values covering `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// One-dimensional start grid.
pub fn grid_1d(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
    linspace(lo, hi, n).into_iter().map(|v| vec![v]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    /// The attention gain.
    Attention,
    /// The environmental input.
    Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub equilibria: Vec<Equilibrium>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationResult {
    pub kind: SweepKind,
    pub points: Vec<SweepPoint>,
    /// Smallest attention value with at least three equilibria (attention sweeps).
    pub u_star: Option<f64>,
    /// Sweep values at which the equilibrium count changes from the previous value.
    pub folds: Vec<f64>,
}

/// Equilibria of a one-parameter family `ż = rhs(z, s)` over `resolution`
/// evenly spaced values of `s` in `range`. Sweep values are evaluated in
/// parallel and reported in sweep order.
pub fn bifurcation_sweep<F>(
    rhs: F,
    kind: SweepKind,
    range: (f64, f64),
    resolution: usize,
    grid: &[Vec<f64>],
    search: &EquilibriumSearch,
) -> Result<BifurcationResult, NodError>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    if resolution < 2 {
        return Err(NodError::InvalidParam(format!("sweep resolution must be at least 2, got {resolution}")));
    }
    let values = linspace(range.0, range.1, resolution);
    let points = values
        .par_iter()
        .map(|&s| {
            find_equilibria(|z| rhs(z, s), grid, search).map(|equilibria| SweepPoint { value: s, equilibria })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let u_star = match kind {
        SweepKind::Attention => points.iter().find(|p| p.equilibria.len() >= 3).map(|p| p.value),
        SweepKind::Input => None,
    };
    let folds = points
        .windows(2)
        .filter(|w| w[0].equilibria.len() != w[1].equilibria.len())
        .map(|w| w[1].value)
        .collect();
    Ok(BifurcationResult {
        kind,
        points,
        u_star,
        folds,
    })
}

impl BifurcationResult {
    /// CSV with columns `sweep_value,equilibrium,stable`, one row per
    /// equilibrium; `component` selects the state coordinate reported.
    pub fn write_csv<W: io::Write>(&self, out: W, component: usize) -> Result<(), NodError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sweep_value", "equilibrium", "stable"])?;
        for p in &self.points {
            for e in &p.equilibria {
                let z = e.z.get(component).copied().unwrap_or(f64::NAN);
                w.write_record([p.value.to_string(), z.to_string(), e.stable.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Rows of a sweep CSV written by [`BifurcationResult::write_csv`].
pub fn read_sweep_csv<R: io::Read>(input: R) -> Result<Vec<(f64, f64, bool)>, NodError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<&str, NodError> {
            rec.get(i).ok_or_else(|| NodError::Parse {
                line: line + 2,
                message: format!("missing column {i}"),
            })
        };
        let bad = |m: String| NodError::Parse { line: line + 2, message: m };
        let s: f64 = parse(0)?.parse().map_err(|e| bad(format!("{e}")))?;
        let z: f64 = parse(1)?.parse().map_err(|e| bad(format!("{e}")))?;
        let st: bool = parse(2)?.parse().map_err(|e| bad(format!("{e}")))?;
        rows.push((s, z, st));
    }
    Ok(rows)
}

/// Equilibrium traces of an up-then-down sweep of the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HysteresisTrace {
    /// Input values in ascending order.
    pub b: Vec<f64>,
    /// Equilibria reached while sweeping upward, aligned with `b`.
    pub forward: Vec<Vec<f64>>,
    /// Equilibria reached while sweeping downward, aligned with `b`.
    pub backward: Vec<Vec<f64>>,
}

impl HysteresisTrace {
    /// Sup-norm gap between the two traces at each input value.
    pub fn gaps(&self) -> Vec<f64> {
        self.forward
            .iter()
            .zip(&self.backward)
            .map(|(f, b)| f.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())))
            .collect()
    }

    /// Extent of the input interval on which the traces disagree by more
    /// than `threshold`, measured as (count of such grid values) × spacing.
    pub fn loop_width(&self, threshold: f64) -> f64 {
        if self.b.len() < 2 {
            return 0.0;
        }
        let spacing = (self.b[self.b.len() - 1] - self.b[0]) / (self.b.len() - 1) as f64;
        self.gaps().iter().filter(|g| **g > threshold).count() as f64 * spacing
    }

    /// Gap at the grid value closest to `b`.
    pub fn gap_at(&self, b: f64) -> f64 {
        let idx = self
            .b
            .iter()
            .enumerate()
            .min_by(|x, y| (x.1 - b).abs().total_cmp(&(y.1 - b).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.gaps()[idx]
    }
}

/// Quasi-static sweep of the input `b` up over `range` and back down,
/// warm-starting each equilibrium search from the previous state.
/// `search.max_steps` bounds the integration at each input value.
pub fn hysteresis_sweep<F>(
    rhs: F,
    z_init: &[f64],
    range: (f64, f64),
    resolution: usize,
    search: &EquilibriumSearch,
) -> Result<HysteresisTrace, NodError>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    if resolution < 2 {
        return Err(NodError::InvalidParam(format!("sweep resolution must be at least 2, got {resolution}")));
    }
    let b = linspace(range.0, range.1, resolution);
    let settle = |z: &[f64], bv: f64| {
        integrate_to_rest(&|s: &[f64]| rhs(s, bv), z, search).ok_or_else(|| NodError::NoConvergence {
            context: format!("hysteresis sweep did not settle at b = {bv}"),
        })
    };
    let mut forward = Vec::with_capacity(resolution);
    let mut z = z_init.to_vec();
    for &bv in &b {
        z = settle(&z, bv)?;
        forward.push(z.clone());
    }
    let mut backward = vec![Vec::new(); resolution];
    for (i, &bv) in b.iter().enumerate().rev() {
        z = settle(&z, bv)?;
        backward[i] = z.clone();
    }
    Ok(HysteresisTrace { b, forward, backward })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nod::pitchfork_rhs;

    fn pitch(u: f64) -> impl Fn(&[f64]) -> Vec<f64> {
        move |z: &[f64]| vec![pitchfork_rhs(z[0], u)]
    }

    #[test]
    fn pitchfork_below_critical_has_single_stable_origin() {
        let eq = find_equilibria(pitch(-1.0), &grid_1d(-3.0, 3.0, 13), &EquilibriumSearch::default()).unwrap();
        assert_eq!(eq.len(), 1);
        assert!(eq[0].z[0].abs() < 1e-8 && eq[0].stable);
    }

    #[test]
    fn pitchfork_above_critical_has_three() {
        let eq = find_equilibria(pitch(1.0), &grid_1d(-3.0, 3.0, 13), &EquilibriumSearch::default()).unwrap();
        let z: Vec<f64> = eq.iter().map(|e| e.z[0]).collect();
        let stable: Vec<bool> = eq.iter().map(|e| e.stable).collect();
        assert_eq!(stable, vec![true, false, true]);
        for (got, want) in z.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-8, "{z:?}");
        }
    }

    #[test]
    fn no_roots_is_an_error() {
        let r = find_equilibria(|z: &[f64]| vec![1.0 + z[0] * z[0]], &grid_1d(-1.0, 1.0, 3), &EquilibriumSearch {
            max_steps: 1000,
            ..Default::default()
        });
        assert!(matches!(r, Err(NodError::NoConvergence { .. })));
    }

    #[test]
    fn two_dimensional_saddle_classification() {
        // ẋ = x, ẏ = −y: a saddle, unstable
        let eq = find_equilibria(
            |z: &[f64]| vec![z[0], -z[1]],
            &[vec![0.5, 0.5], vec![-0.2, 0.1]],
            &EquilibriumSearch { max_steps: 2000, ..Default::default() },
        )
        .unwrap();
        assert_eq!(eq.len(), 1);
        assert!(!eq[0].stable && (eq[0].leading_real - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sweep_csv_roundtrip() {
        let res = bifurcation_sweep(
            |z, u| vec![pitchfork_rhs(z[0], u)],
            SweepKind::Attention,
            (-1.0, 1.0),
            5,
            &grid_1d(-2.0, 2.0, 9),
            &EquilibriumSearch::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        res.write_csv(&mut buf, 0).unwrap();
        let rows = read_sweep_csv(buf.as_slice()).unwrap();
        let n: usize = res.points.iter().map(|p| p.equilibria.len()).sum();
        assert_eq!(rows.len(), n);
        assert_eq!(res.u_star, Some(0.5));
        assert!(bifurcation_sweep(|z, _| z.to_vec(), SweepKind::Input, (0.0, 1.0), 1, &grid_1d(0.0, 1.0, 2), &EquilibriumSearch::default()).is_err());
    }
}
