//! Central finite-difference oracle for checking analytic gradients.
//!
//! Only forward evaluations are used here, so the check stays independent of
//! the reverse pass it validates.

use crate::real::Real;

/// Error metric shared by all gradient checks: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of `f` at `x` along every coordinate.
pub fn numeric_gradient<T: Real>(x: &[T], h: f64, mut f: impl FnMut(&[T]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = T::from_f64_lossy(orig.as_f64() + h);
            let plus = f(&probe);
            probe[i] = T::from_f64_lossy(orig.as_f64() - h);
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error between two gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}
