//! Central finite differences for gradient verification.
//!
//! This is the independent oracle used by tests and the acceptance suite;
//! it never feeds back into any analytic gradient path.

/// Gradient of a scalar function by central differences,
/// `(f(x+h) − f(x−h)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + eps;
        let plus = f(&probe);
        probe[i] = point[i] - eps;
        let minus = f(&probe);
        probe[i] = point[i];
        grads.push((plus - minus) / (2.0 * eps));
    }
    grads
}

/// Directional finite difference along selected coordinates only; returns
/// `(index, derivative)` pairs. Used where the full gradient would be too
/// expensive to probe.
pub fn finite_diff_grad_at<F>(f: F, point: &[f64], indices: &[usize], eps: f64) -> Vec<(usize, f64)>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = point.to_vec();
    indices
        .iter()
        .map(|&i| {
            probe[i] = point[i] + eps;
            let plus = f(&probe);
            probe[i] = point[i] - eps;
            let minus = f(&probe);
            probe[i] = point[i];
            (i, (plus - minus) / (2.0 * eps))
        })
        .collect()
}

/// Relative agreement criterion between an analytic and a finite-difference
/// derivative: |a − f| ≤ tol · max(|a|, |f|, floor).
pub fn grads_agree(analytic: f64, fd: f64, tol: f64, floor: f64) -> bool {
    (analytic - fd).abs() <= tol * analytic.abs().max(fd.abs()).max(floor)
}
