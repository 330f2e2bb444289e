//! Central-difference gradient verification.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst-agreeing coordinate.
    pub worst_index: usize,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `loss` over the flat
/// parameter vector `theta`. Each coordinate is nudged by +/- h and restored;
/// `loss` must treat `theta` as the full parameter state (typically by
/// writing it back into a model before evaluating).
///
/// Relative error uses max(|analytic|, |numeric|, 1.0) as the denominator so
/// tiny gradients are judged on absolute terms.
pub fn grad_check<F>(
    theta: &mut [f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if theta.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} analytic gradients",
            theta.len(),
            analytic.len()
        )));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Config(format!("step size must be positive, got {h}")));
    }
    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0usize;
    for i in 0..theta.len() {
        let saved = theta[i];
        theta[i] = saved + h;
        let up = loss(theta)?;
        theta[i] = saved - h;
        let down = loss(theta)?;
        theta[i] = saved;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss while probing parameter {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        checked: theta.len(),
        max_rel_err,
        worst_index,
        passed: max_rel_err < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // L = (w * x - 2)^2 at w = 1, x = 1 has dL/dw = 2 (w x - 2) x = -2.
    #[test]
    fn quadratic_gradient_verifies() {
        let mut theta = vec![1.0];
        let analytic = vec![-2.0];
        let report = grad_check(&mut theta, &analytic, 1e-5, 1e-6, |t| {
            let r = t[0] * 1.0 - 2.0;
            Ok(r * r)
        })
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 1);
        assert_eq!(theta, vec![1.0]);
    }

    #[test]
    fn flags_a_wrong_gradient() {
        let mut theta = vec![1.0];
        let analytic = vec![-1.5];
        let report = grad_check(&mut theta, &analytic, 1e-5, 1e-4, |t| {
            let r = t[0] - 2.0;
            Ok(r * r)
        })
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst_index, 0);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        // ln goes NaN on the negative probe of theta = 0.
        let mut theta = vec![0.0];
        let analytic = vec![0.0];
        let err = grad_check(&mut theta, &analytic, 1e-5, 1e-4, |t| Ok(t[0].ln())).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
