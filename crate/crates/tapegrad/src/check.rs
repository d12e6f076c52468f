//! Finite-difference utilities for verifying analytic gradients.

use ndarray::ArrayD;

/// Central-difference gradient of `f` at `x0`, perturbing one element at
/// a time by `step`.
pub fn central_diff<F>(x0: &ArrayD<f64>, step: f64, mut f: F) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::<f64>::zeros(x0.raw_dim());
    let mut x = x0.clone();
    for idx in ndarray::indices(x0.raw_dim()) {
        let orig = x[&idx];
        x[&idx] = orig + step;
        let fp = f(&x);
        x[&idx] = orig - step;
        let fm = f(&x);
        x[&idx] = orig;
        grad[&idx] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Maximum elementwise discrepancy between two gradients, normalized by
/// the larger overall magnitude: `max|a - b| / max(max|a|, max|b|, 1e-8)`.
/// A global denominator keeps near-zero elements from exploding the
/// ratio while still scaling with the gradient's natural size.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_err: shape mismatch");
    let diff = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let mag_a = a.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    let mag_b = b.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    diff / mag_a.max(mag_b).max(1e-8)
}
