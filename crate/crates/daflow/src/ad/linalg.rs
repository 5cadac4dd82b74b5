//! Plain (non-recorded) dense kernels shared by the tape ops and by
//! value-level code: Cholesky factorization with the PSD safeguard, and
//! triangular solves.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Lower Cholesky factor of a symmetric positive definite matrix.
/// Returns `None` if a pivot is non-positive.
pub fn cholesky_raw(a: &Array2<f64>) -> Option<Array2<f64>> {
    let d = a.nrows();
    let mut l = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut s = a[(j, j)];
        for k in 0..j {
            s -= l[(j, k)] * l[(j, k)];
        }
        if s <= 0.0 || !s.is_finite() {
            return None;
        }
        let piv = s.sqrt();
        l[(j, j)] = piv;
        for i in (j + 1)..d {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / piv;
        }
    }
    Some(l)
}

/// Symmetrize, factorize; on failure add a single jitter of
/// `1e-10 * tr(A)/d` to the diagonal and retry, then give up.
pub fn cholesky_psd(a: &Array2<f64>, op: &'static str) -> Result<Array2<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Shape {
            op,
            detail: format!("cholesky of non-square {}x{}", a.nrows(), a.ncols()),
        });
    }
    let sym = 0.5 * (a + &a.t());
    if let Some(l) = cholesky_raw(&sym) {
        return Ok(l);
    }
    let d = sym.nrows() as f64;
    let jitter = 1e-10 * sym.diag().sum() / d;
    if jitter > 0.0 {
        let mut jittered = sym;
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(l) = cholesky_raw(&jittered) {
            return Ok(l);
        }
    }
    Err(Error::NotPsd { op })
}

/// Solve `L X = B` with `L` lower triangular (forward substitution).
pub fn solve_lower(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let d = l.nrows();
    let m = b.ncols();
    let mut x = b.clone();
    for j in 0..m {
        for i in 0..d {
            let mut s = x[(i, j)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, j)];
            }
            x[(i, j)] = s / l[(i, i)];
        }
    }
    x
}

/// Solve `L^T X = B` with `L` lower triangular (back substitution).
pub fn solve_lower_t(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let d = l.nrows();
    let m = b.ncols();
    let mut x = b.clone();
    for j in 0..m {
        for i in (0..d).rev() {
            let mut s = x[(i, j)];
            for k in (i + 1)..d {
                s -= l[(k, i)] * x[(k, j)];
            }
            x[(i, j)] = s / l[(i, i)];
        }
    }
    x
}

/// `A^{-1} B` through the Cholesky factor of symmetrized `A`.
pub fn psd_solve_plain(a: &Array2<f64>, b: &Array2<f64>, op: &'static str) -> Result<Array2<f64>> {
    let l = cholesky_psd(a, op)?;
    Ok(solve_lower_t(&l, &solve_lower(&l, b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn cholesky_of_identity_is_identity() {
        let a = Array2::eye(3);
        let l = cholesky_psd(&a, "test").unwrap();
        assert_eq!(l, Array2::<f64>::eye(3));
    }

    #[test]
    fn cholesky_hand_example() {
        // [[4,2],[2,5]] = [[2,0],[1,2]] [[2,1],[0,2]]
        let a = arr2(&[[4.0, 2.0], [2.0, 5.0]]);
        let l = cholesky_psd(&a, "test").unwrap();
        let expect = arr2(&[[2.0, 0.0], [1.0, 0.0 + 2.0]]);
        for (x, y) in l.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = arr2(&[[1.0, 0.0], [0.0, -1.0]]);
        assert!(matches!(cholesky_psd(&a, "test"), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn triangular_solves_invert() {
        let a = arr2(&[[4.0, 2.0, 0.5], [2.0, 5.0, 1.0], [0.5, 1.0, 3.0]]);
        let l = cholesky_psd(&a, "test").unwrap();
        let b = arr2(&[[1.0], [2.0], [3.0]]);
        let x = solve_lower_t(&l, &solve_lower(&l, &b));
        let back = a.dot(&x);
        for (u, v) in back.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
