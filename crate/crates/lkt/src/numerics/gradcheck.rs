//! Central finite differences for verifying analytic gradients. Only
//! forward evaluations are used, so checks stay independent of the
//! backward implementation they validate.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Worst relative error between two gradient vectors. Components where
/// both magnitudes fall below `1e-6` are compared absolutely against
/// `1e-8` instead, so near-zero gradients do not blow up the ratio.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs());
        let err = if denom < 1e-6 {
            if (a - n).abs() <= 1e-8 {
                0.0
            } else {
                1.0
            }
        } else {
            (a - n).abs() / denom
        };
        worst = worst.max(err);
    }
    worst
}
