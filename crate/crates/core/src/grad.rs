//! Finite-difference verification of analytic gradients.
//!
//! Every backward rule in the crate is checked against central differences:
//! `(f(p + eps) - f(p - eps)) / (2 eps)` per coordinate, with relative error
//! measured against `max(|analytic|, |numeric|, 1e-8)`.

use crate::error::{MahaError, Result};

/// Floor for the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Outcome of one finite-difference check over a parameter set.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all coordinates of the parameter set.
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares `analytic` against a central-difference estimate of the gradient
/// of `f` at `params`, coordinate by coordinate.
///
/// `f` must evaluate to a finite scalar at every perturbed point; a non-finite
/// value is an evaluation error.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(MahaError::Shape(format!(
            "finite_diff_check: {} params vs {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let mut scratch = params.to_vec();
    let mut max_rel_err: f64 = 0.0;
    for i in 0..params.len() {
        let orig = scratch[i];
        scratch[i] = orig + eps;
        let plus = eval_finite(&mut f, &scratch)?;
        scratch[i] = orig - eps;
        let minus = eval_finite(&mut f, &scratch)?;
        scratch[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        let rel = (analytic[i] - numeric).abs() / denom;
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(GradCheckReport { max_rel_err, tolerance: tol, pass: max_rel_err < tol })
}

fn eval_finite<F>(f: &mut F, params: &[f64]) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let v = f(params)?;
    if !v.is_finite() {
        return Err(MahaError::NonFinite { stage: "finite_diff_check evaluation".into() });
    }
    Ok(v)
}

/// A named check result, as produced by the gradient-check suites.
#[derive(Debug, Clone)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradCheckReport,
}

impl NamedCheck {
    pub fn new(name: impl Into<String>, report: GradCheckReport) -> Self {
        Self { name: name.into(), report }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        // f(w) = w'w, grad = 2w
        let w = [1.0, 2.0];
        let analytic = [2.0, 4.0];
        let report = finite_diff_check(
            |p| Ok(p.iter().map(|&v| v * v).sum()),
            &w,
            &analytic,
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_sum_of_squares() {
        use crate::tensor::{softmax_rows, softmax_rows_backward, SeqMatrix};
        let params = [0.0, 0.0];
        let f = |p: &[f64]| {
            let x = SeqMatrix::new(1, 2, p.to_vec())?;
            let y = softmax_rows(&x);
            Ok(y.data().iter().map(|&v| v * v).sum())
        };
        let x = SeqMatrix::new(1, 2, params.to_vec()).unwrap();
        let y = softmax_rows(&x);
        let grad_y = y.scale(2.0);
        let grad_x = softmax_rows_backward(&y, &grad_y).unwrap();
        let report = finite_diff_check(f, &params, grad_x.data(), 1e-6, 1e-6).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn zero_function_passes_with_zero_error() {
        let params = [0.3, -0.7, 1.1];
        let analytic = [0.0; 3];
        let report = finite_diff_check(|_| Ok(0.0), &params, &analytic, 1e-6, 1e-10).unwrap();
        assert!(report.pass);
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn corrupted_gradient_fails() {
        // Negative control: a deliberately wrong backward rule must be caught.
        let w = [1.0, 2.0];
        let wrong = [2.0, 3.0]; // true gradient is [2, 4]
        let report = finite_diff_check(
            |p| Ok(p.iter().map(|&v| v * v).sum()),
            &w,
            &wrong,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let r = finite_diff_check(|_| Ok(f64::NAN), &[1.0], &[0.0], 1e-6, 1e-4);
        assert!(matches!(r, Err(MahaError::NonFinite { .. })));
    }
}
