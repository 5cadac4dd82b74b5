//! Central finite-difference gradients. The default step h = 1e-5 balances
//! truncation error (O(h^2)) against float64 rounding for the objective
//! scales exercised in the fixtures.

/// Central difference per coordinate: (f(x+h e_i) - f(x-h e_i)) / 2h.
///
/// `f` must be deterministic (freeze any RNG draws before calling).
pub fn fd_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut g = vec![0.0; x.len()];
    let mut pt = x.to_vec();
    for i in 0..x.len() {
        let orig = pt[i];
        pt[i] = orig + h;
        let fp = f(&pt);
        pt[i] = orig - h;
        let fm = f(&pt);
        pt[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Directional derivative (f(x + h v) - f(x - h v)) / 2h.
pub fn fd_directional<F>(mut f: F, x: &[f64], v: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), v.len());
    let plus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// The normalized discrepancy used throughout the gradient checks:
/// |a - b| / (1 + |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = fd_gradient(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn constant_function() {
        let g = fd_gradient(|_| 42.0, &[1.0, 2.0], 1e-5);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn directional_matches_inner_product() {
        let f = |x: &[f64]| x[0] * x[0] + 2.0 * x[1];
        let d = fd_directional(f, &[1.0, 1.0], &[0.6, 0.8], 1e-6);
        assert!((d - (2.0 * 0.6 + 2.0 * 0.8)).abs() < 1e-6);
    }
}
