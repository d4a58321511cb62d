//! Shared helpers for unit tests. Test-only code.

/// Central finite differences of `f` at `at`, step `h_scale * max(1, |x_i|)`
/// per coordinate.
pub fn central_diff(at: &[f64], h_scale: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; at.len()];
    let mut probe = at.to_vec();
    for i in 0..at.len() {
        let h = h_scale * at[i].abs().max(1.0);
        probe[i] = at[i] + h;
        let hi = f(&probe);
        probe[i] = at[i] - h;
        let lo = f(&probe);
        probe[i] = at[i];
        grad[i] = (hi - lo) / (2.0 * h);
    }
    grad
}

/// `||a - b||_inf / max(||a||_inf, ||b||_inf, tiny)`.
pub fn max_rel_err_slices(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0f64, |acc, &x| acc.max(x.abs()))
        .max(1e-12);
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc.max((x - y).abs()))
        / scale
}
