//! Central finite-difference gradient checks.

use super::dense::Tensor;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so that gradients that are
/// zero up to roundoff are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over
    /// the coordinates that did not straddle a kink.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose `±step` perturbation changed a ReLU sign or a
    /// max-pool winner. The function is only subdifferentiable there, so they
    /// are reported and excluded from the verdict.
    pub kink_indices: Vec<usize>,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when the function itself failed to evaluate.
    pub error: Option<String>,
}

impl GradCheckReport {
    fn failed(tolerance: f64, error: String) -> Self {
        Self {
            max_rel_error: f64::INFINITY,
            worst_index: None,
            checked: 0,
            kink_indices: Vec::new(),
            tolerance,
            passed: false,
            error: Some(error),
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of `eval` around `point`.
///
/// `eval` returns the scalar value and the activation signature of the pass
/// (see [`Tape::activation_signature`]).
pub fn compare_with_central_differences<E>(
    analytic: &[f64],
    point: &[f64],
    step: f64,
    tolerance: f64,
    center_signature: u64,
    mut eval: E,
) -> GradCheckReport
where
    E: FnMut(&[f64]) -> Result<(f64, u64)>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(analytic.len(), point.len());
    let mut x = point.to_vec();
    let mut worst = 0.0;
    let mut worst_index = None;
    let mut kinks = Vec::new();
    let mut checked = 0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = eval(&x);
        x[i] = orig - step;
        let minus = eval(&x);
        x[i] = orig;
        let ((fp, sp), (fm, sm)) = match (plus, minus) {
            (Ok(p), Ok(m)) => (p, m),
            (Err(e), _) | (_, Err(e)) => return GradCheckReport::failed(tolerance, e.to_string()),
        };
        if sp != center_signature || sm != center_signature {
            kinks.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        checked += 1;
        if err > worst || worst_index.is_none() {
            worst = err;
            worst_index = Some(i);
        }
    }
    GradCheckReport {
        max_rel_error: worst,
        worst_index,
        checked,
        kink_indices: kinks,
        tolerance,
        passed: worst <= tolerance,
        error: None,
    }
}

/// Checks the gradient of the scalar function `f` at `point`.
///
/// `f` receives a tape and the differentiable input and must return a scalar
/// built on that tape. It must be deterministic (no active dropout).
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64, tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let run = |values: &[f64], grad: bool| -> Result<(f64, u64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let t = Tensor::new(point.shape().to_vec(), values.to_vec())?;
        let x = if grad { tape.variable(t)? } else { tape.constant(t)? };
        let y = f(&mut tape, x)?;
        let value = tape.value(y)?.values()[0];
        let sig = tape.activation_signature();
        let g = if grad {
            tape.backward(y)?;
            Some(tape.grad(x)?.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; values.len()]))
        } else {
            None
        };
        Ok((value, sig, g))
    };
    // Signatures are taken from differentiable passes so constant-folded
    // branches on either side record the same decisions.
    let sig_pass = |values: &[f64]| run(values, true).map(|(v, s, _)| (v, s));
    let (_, center_sig, analytic) = match run(point.values(), true) {
        Ok(r) => r,
        Err(e) => return GradCheckReport::failed(tolerance, e.to_string()),
    };
    let analytic = analytic.unwrap_or_default();
    compare_with_central_differences(&analytic, point.values(), step, tolerance, center_sig, sig_pass)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let point = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let report = finite_difference_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum(sq)
            },
            &point,
            1e-5,
            1e-8,
        );
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error < 1e-8);
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn deep_tanh_chain_passes() {
        let point = Tensor::vector(vec![0.3, -0.7, 1.1]);
        let report = finite_difference_check(
            |tape, x| {
                let mut y = x;
                for _ in 0..5 {
                    y = tape.tanh(y)?;
                }
                tape.sum(y)
            },
            &point,
            1e-5,
            1e-4,
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn relu_kink_is_flagged_not_failed() {
        let point = Tensor::vector(vec![0.0, 1.5]);
        let report = finite_difference_check(
            |tape, x| {
                let y = tape.relu(x)?;
                tape.sum(y)
            },
            &point,
            1e-5,
            1e-4,
        );
        assert_eq!(report.kink_indices, vec![0]);
        assert!(report.passed, "{report:?}");
    }
}
