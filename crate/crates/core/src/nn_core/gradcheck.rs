//! Central-difference gradient checking.

use serde::Serialize;

use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub epsilon: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against `(f(p + ε e_k) − f(p − ε e_k)) / 2ε` for every
/// coordinate `k`.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(Error::Precondition(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let base = loss_fn(params);
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed point".into()));
    }
    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        epsilon,
        coordinates: params.len(),
    };
    for k in 0..params.len() {
        let orig = p[k];
        p[k] = orig + epsilon;
        let plus = loss_fn(&p);
        p[k] = orig - epsilon;
        let minus = loss_fn(&p);
        p[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at perturbed coordinate {k}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = relative_error(analytic[k], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coordinate = k;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = [0.3, -1.7, 2.5, 10.0, -0.001];
        let report =
            finite_diff_check(|x| 0.5 * x.iter().map(|v| v * v).sum::<f64>(), &p, &p, 1e-4)
                .unwrap();
        assert!(report.max_rel_error <= 1e-7, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let p = [1.0, 2.0];
        let report = finite_diff_check(|x| x[0] * x[1], &p, &[2.0, 1.5], 1e-4).unwrap();
        assert_eq!(report.worst_coordinate, 1);
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn non_finite_perturbation_names_coordinate() {
        let p = [1.0, 0.0];
        let err =
            finite_diff_check(|x| x[1].ln().abs() + x[0], &[1.0, 1e-5], &p, 1e-4).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }

    #[test]
    fn rejects_bad_epsilon() {
        assert!(finite_diff_check(|x| x[0], &[1.0], &[1.0], 0.0).is_err());
    }
}
