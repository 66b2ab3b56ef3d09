use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::NodError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusivityReport {
    pub pair: (usize, usize),
    /// Least-squares `c` in `z_j ≈ −c·z_l`, pooled over agents and time.
    pub scale: f64,
    /// Pearson correlation of the pooled `(z_j, z_l)` samples.
    pub correlation: f64,
    /// `(a^o_jl, a^o_lj)`.
    pub beliefs: (f64, f64),
    pub exclusive: bool,
}

pub const CORRELATION_THRESHOLD: f64 = -0.95;

/// Checks every unordered category pair of a preference trace for
/// anti-phase behaviour and nonpositive mutual beliefs.
///
/// `trace[t]` is the `N_a × N_o` preference matrix at frame `t`.
pub fn detect_mutual_exclusivity(trace: &[DMatrix<f64>], a_o: &DMatrix<f64>) -> Result<Vec<ExclusivityReport>, NodError> {
    if trace.len() < 2 {
        return Err(NodError::TooShort { frames: trace.len() });
    }
    let (n_a, n_o) = trace[0].shape();
    if a_o.shape() != (n_o, n_o) {
        return Err(NodError::Shape {
            what: "A_o",
            expected: (n_o, n_o),
            found: a_o.shape(),
        });
    }
    if let Some(bad) = trace.iter().find(|z| z.shape() != (n_a, n_o)) {
        return Err(NodError::Shape {
            what: "trace frame",
            expected: (n_a, n_o),
            found: bad.shape(),
        });
    }
    let column = |j: usize| -> Vec<f64> { trace.iter().flat_map(|z| z.column(j).iter().copied().collect::<Vec<_>>()).collect() };
    let cols: Vec<Vec<f64>> = (0..n_o).map(column).collect();
    let centred_var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>()
    };
    for (j, c) in cols.iter().enumerate() {
        if centred_var(c) == 0.0 {
            return Err(NodError::DegenerateTrace { category: j });
        }
    }
    let mut out = Vec::new();
    for j in 0..n_o {
        for l in j + 1..n_o {
            let (zj, zl) = (&cols[j], &cols[l]);
            let n = zj.len() as f64;
            let scale = -zj.iter().zip(zl).map(|(a, b)| a * b).sum::<f64>() / zl.iter().map(|b| b * b).sum::<f64>();
            let mj = zj.iter().sum::<f64>() / n;
            let ml = zl.iter().sum::<f64>() / n;
            let cov: f64 = zj.iter().zip(zl).map(|(a, b)| (a - mj) * (b - ml)).sum();
            let correlation = (cov / (centred_var(zj) * centred_var(zl)).sqrt()).clamp(-1.0, 1.0);
            let beliefs = (a_o[(j, l)], a_o[(l, j)]);
            out.push(ExclusivityReport {
                pair: (j, l),
                scale,
                correlation,
                beliefs,
                exclusive: correlation <= CORRELATION_THRESHOLD && beliefs.0 <= 0.0 && beliefs.1 <= 0.0,
            });
        }
    }
    Ok(out)
}
