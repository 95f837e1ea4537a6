//! Finite-difference verification of analytic gradients.
//!
//! Runs in f64 only; the comparison is central differences with a fixed
//! step against the analytic gradient, scored as max relative error
//! |a - n| / max(|a|, |n|, 1e-8).

use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate where the worst relative error occurred.
    pub worst_coord: usize,
}

/// Central-difference gradient of a scalar function at `x`.
pub fn central_difference<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Compare analytic vs numeric gradients. A non-finite entry on either
/// side fails with the offending coordinate.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> Result<GradCheck> {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_coord: 0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        if !a.is_finite() || !n.is_finite() {
            return Err(Error::NonFiniteGradient { coord: i });
        }
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if rel > worst.max_rel_error {
            worst = GradCheck {
                max_rel_error: rel,
                worst_coord: i,
            };
        }
    }
    Ok(worst)
}

/// Check an analytic gradient of `f` at `x` against central differences.
pub fn check<F>(f: F, x: &[f64], analytic: &[f64], step: f64) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> f64,
{
    let numeric = central_difference(f, x, step);
    compare(analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        // f(x) = sum x_i^2, grad = 2x
        let x = vec![0.5, -1.25, 2.0, 0.0];
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let report = check(|p| p.iter().map(|v| v * v).sum(), &x, &analytic, DEFAULT_STEP).unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let x = vec![1.0, 2.0];
        let wrong = vec![2.0, 3.0]; // true grad of x^2 sum at x=2 is 4
        let report = check(|p| p.iter().map(|v| v * v).sum(), &x, &wrong, DEFAULT_STEP).unwrap();
        assert!(report.max_rel_error > 0.1);
        assert_eq!(report.worst_coord, 1);
    }

    #[test]
    fn non_finite_gradient_names_coordinate() {
        let err = compare(&[0.0, f64::NAN], &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { coord: 1 }));
    }
}
