//! Central finite differences for gradient verification. Deliberately uses
//! only forward evaluations, so it stays independent of the tape's backward
//! rules.

/// d f / d x_i via (f(x+h e_i) - f(x-h e_i)) / 2h for every coordinate.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// |a-b| / max(1, |a|, |b|): relative for large magnitudes, absolute near 0.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| rel_err(a, b))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_square() {
        let g = finite_diff(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!(rel_err(g[0], 6.0) < 1e-9);
    }

    #[test]
    fn rel_err_is_absolute_near_zero() {
        assert!(rel_err(1e-9, 0.0) < 1e-8);
        assert!(rel_err(2000.0, 2002.0) < 2e-3);
    }
}
