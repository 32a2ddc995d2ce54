//! Central finite-difference gradient verification (64-bit).

use crate::error::{MedmixError, Result};

/// Pass threshold for [`grad_check`].
pub const REL_ERR_TOL: f64 = 1e-4;

/// Denominator floor for the relative error. Coordinates whose true gradient
/// is below this magnitude are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Perturbs every coordinate of `point` by `±step`, compares the central
/// difference of `f` against `analytic`, and returns the worst relative error.
pub fn grad_check<F>(mut f: F, point: &[f64], analytic: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if point.len() != analytic.len() {
        return Err(MedmixError::Shape {
            op: "grad_check",
            detail: format!("{} coordinates, {} gradient entries", point.len(), analytic.len()),
        });
    }
    if !analytic.iter().all(|g| g.is_finite()) {
        return Err(MedmixError::NonFinite("analytic gradient".into()));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(MedmixError::NonFinite(format!("objective at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(rel_error(analytic[i], numeric));
    }
    Ok(worst)
}
