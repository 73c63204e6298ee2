//! Central-finite-difference verification helpers, shared by unit tests and
//! the acceptance suite. These deliberately re-evaluate the checked function
//! instead of reusing any recorded graph.

/// d/dx_i f(x) by central differences, one coordinate at a time.
pub fn central_difference(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe);
        probe[i] = orig - eps;
        let lo = f(&probe);
        probe[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Largest relative error between two gradient vectors, with an absolute
/// floor so negligible entries are judged against noise rather than zero.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
