use super::{DiffError, Tape, Tensor, Var};

/// Worst disagreement between the tape gradient and central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter tensor, flat element) where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item();
    if !value.is_finite() {
        return Err(DiffError::NonFiniteObjective { value });
    }
    Ok(value)
}

/// Compares the reverse-mode gradient of a scalar objective with
/// `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h` for every element of every parameter.
///
/// The relative error per element is `|analytic − numeric| / (|analytic| + 1e-12)`.
pub fn grad_check_many<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    if !(h > 0.0) {
        return Err(DiffError::BadStep(h));
    }
    check_with(&f, params, |g| Ok((g(h)? - g(-h)?) / (2.0 * h)))
}

/// As [`grad_check_many`], but each numeric derivative comes from Ridders'
/// polynomial extrapolation of central differences, starting at step `h0`
/// and shrinking by 1.4 per stage.
///
/// Plain central differences bottom out near `1e-11 · |f|` in absolute
/// error, so elements whose derivative is orders of magnitude below the
/// objective cannot reach tight relative tolerances with them. The
/// extrapolated estimate pushes that floor down by several digits.
pub fn grad_check_many_extrapolated<F>(f: F, params: &[Tensor], h0: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    if !(h0 > 0.0) {
        return Err(DiffError::BadStep(h0));
    }
    check_with(&f, params, |g| ridders(g, h0))
}

fn ridders(g: &mut dyn FnMut(f64) -> Result<f64, DiffError>, h0: f64) -> Result<f64, DiffError> {
    const CON: f64 = 1.4;
    const STAGES: usize = 10;
    const SAFE: f64 = 2.0;
    let mut table = [[0.0f64; STAGES]; STAGES];
    let mut h = h0;
    table[0][0] = (g(h)? - g(-h)?) / (2.0 * h);
    let (mut best, mut err) = (table[0][0], f64::INFINITY);
    for i in 1..STAGES {
        h /= CON;
        table[0][i] = (g(h)? - g(-h)?) / (2.0 * h);
        let mut fac = CON * CON;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON * CON;
            let e = (table[j][i] - table[j - 1][i]).abs().max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    Ok(best)
}

fn check_with<F, D>(f: &F, params: &[Tensor], mut numeric_of: D) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
    D: FnMut(&mut dyn FnMut(f64) -> Result<f64, DiffError>) -> Result<f64, DiffError>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for e in 0..params[pi].len() {
            let base = params[pi].data()[e];
            let numeric = numeric_of(&mut |delta| {
                work[pi].data_mut()[e] = base + delta;
                let v = evaluate(f, &work);
                work[pi].data_mut()[e] = base;
                v
            })?;
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / (a.abs() + 1e-12);
            if rel > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = rel;
                report.worst = (pi, e);
                report.analytic = a;
                report.numeric = numeric;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Single-tensor form of [`grad_check_many`].
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(theta), h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let r = grad_check(|t, x| t.mul(x, x).and_then(|y| t.sum(y)), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let r = grad_check(
            |t, _x| t.leaf(Tensor::scalar(4.0)),
            &Tensor::vector(vec![1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.analytic, 0.0);
        assert_eq!(r.numeric, 0.0);
    }

    #[test]
    fn extrapolation_resolves_a_tiny_derivative() {
        // f = 1 + 1e-9 tanh(x): the derivative is far below the objective
        let f = |t: &mut Tape, x: Var| {
            let s = t.tanh(x)?;
            let s = t.scale(s, 1e-9)?;
            let s = t.add_const(s, 1.0)?;
            t.sum(s)
        };
        let x = Tensor::scalar(0.3);
        let plain = grad_check(f, &x, 1e-5).unwrap();
        let ext = grad_check_many_extrapolated(|t, v| f(t, v[0]), std::slice::from_ref(&x), 0.1).unwrap();
        assert!(plain.max_rel_error > 1e-5);
        assert!(ext.max_rel_error < 1e-5, "{ext:?}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(matches!(
            grad_check(|t, x| t.sum(x), &Tensor::scalar(1.0), 0.0),
            Err(DiffError::BadStep(_))
        ));
    }

    #[test]
    fn reports_non_finite_objective() {
        let err = grad_check(|t, x| t.recip(x).and_then(|y| t.sum(y)), &Tensor::scalar(0.0), 1e-5);
        assert!(err.is_err());
    }
}
