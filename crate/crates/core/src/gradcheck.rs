//! Central finite differences for checking autodiff gradients.
//!
//! These helpers evaluate the function purely through forward passes, so
//! they stay independent of the reverse sweep they are used to verify.

/// Default step for central differences at f64.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominators below this are replaced by it when forming relative errors,
/// so gradient entries that are (numerically) zero are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Central-difference gradient of `f` at `point`.
pub fn central_difference<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let up = f(&x);
            x[i] = point[i] - step;
            let down = f(&x);
            x[i] = point[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Largest elementwise [`relative_error`] between two gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| relative_error(*a, *b))
        .fold(0.0, f64::max)
}
