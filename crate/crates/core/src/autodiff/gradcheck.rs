//! Central finite-difference gradients for verifying backward rules.
//!
//! The numeric route only ever evaluates the forward pass, so it stays
//! independent of the backward implementation it is used to check.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point);
        point[i] = orig - h;
        let minus = f(&point);
        point[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Worst relative disagreement, with an absolute floor of 1 in the
/// denominator so near-zero components compare absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Step size used throughout the gradient suites.
pub const FD_STEP: f64 = 1e-4;

/// Relative-error tolerance used throughout the gradient suites.
pub const FD_TOL: f64 = 1e-4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = central_difference(f, &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floors_at_one() {
        assert!(max_relative_error(&[1e-9], &[2e-9]) < 1e-8);
        assert!(max_relative_error(&[100.0], &[101.0]) > 9e-3);
    }
}
