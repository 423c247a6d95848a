use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compare `analytic` gradients against central differences of `value`.
///
/// `value` must be deterministic in its argument.
pub fn finite_difference_check<F, G>(
    mut value: F,
    mut analytic: G,
    params: &[Tensor],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
    G: FnMut(&[Tensor]) -> Result<Vec<Tensor>>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let grads = analytic(params)?;
    if grads.len() != params.len()
        || grads.iter().zip(params).any(|(g, p)| g.shape() != p.shape())
    {
        return Err(Error::Contract(
            "analytic gradients do not match parameter shapes".into(),
        ));
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
        tolerance,
        passed: true,
    };
    for (pi, grad) in grads.iter().enumerate() {
        for ci in 0..params[pi].len() {
            let original = params[pi].data()[ci];
            work[pi].data_mut()[ci] = original + epsilon;
            let plus = value(&work)?;
            work[pi].data_mut()[ci] = original - epsilon;
            let minus = value(&work)?;
            work[pi].data_mut()[ci] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite objective perturbing parameter {pi} coordinate {ci}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[ci];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((pi, ci));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_relative_error < tolerance;
    Ok(report)
}

/// Gradient check for a scalar function written against the tape.
///
/// `build` receives one trainable leaf per entry of `params` and returns the
/// scalar output.
pub fn check_tape_gradients<F>(
    build: F,
    params: &[Tensor],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let value = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).item()
    };
    let analytic = |ps: &[Tensor]| -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.backward(out)?;
        Ok(vars
            .iter()
            .zip(ps)
            .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect())
    };
    finite_difference_check(value, analytic, params, epsilon, tolerance)
}
