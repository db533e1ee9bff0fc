//! Finite-difference utilities used to verify analytic gradients.
//!
//! These helpers only evaluate a black-box function, never the tape's
//! backward pass, so they stay independent of the code they check.

/// Central-difference gradient of `f` at `x` with step `h`.
///
/// Each coordinate is perturbed in turn; `f` must be deterministic.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Largest relative error between two gradient vectors, with the denominator
/// floored at 1 so near-zero entries are compared absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}
