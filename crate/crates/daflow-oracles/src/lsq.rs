//! Small dense least squares by normal equations, for closed-form checks of
//! inner-loop gradient ascent limits.

/// Minimize ||G w - y||^2 over w via the normal equations G^T G w = G^T y.
/// `rows` are the rows of G.
pub fn least_squares(rows: &[Vec<f64>], targets: &[f64]) -> Vec<f64> {
    assert_eq!(rows.len(), targets.len());
    let p = rows[0].len();
    let mut gram = vec![vec![0.0; p]; p];
    let mut rhs = vec![0.0; p];
    for (row, &y) in rows.iter().zip(targets) {
        for i in 0..p {
            rhs[i] += row[i] * y;
            for j in 0..p {
                gram[i][j] += row[i] * row[j];
            }
        }
    }
    solve_spd(&mut gram, &mut rhs);
    rhs
}

/// In-place solve of a symmetric positive definite system (unpivoted
/// elimination; fine at the tiny sizes used here).
fn solve_spd(a: &mut [Vec<f64>], b: &mut [f64]) {
    let n = b.len();
    for col in 0..n {
        let p = a[col][col];
        assert!(p > 0.0, "non-positive pivot in least-squares oracle");
        for i in (col + 1)..n {
            let f = a[i][col] / p;
            for j in col..n {
                a[i][j] -= f * a[col][j];
            }
            b[i] -= f * b[col];
        }
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= a[i][k] * b[k];
        }
        b[i] = s / a[i][i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit() {
        // y = 2 x0 - x1, no noise: recovers the coefficients
        let rows = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![2.0, -1.0],
        ];
        let ys: Vec<f64> = rows.iter().map(|r| 2.0 * r[0] - r[1]).collect();
        let w = least_squares(&rows, &ys);
        assert!((w[0] - 2.0).abs() < 1e-12);
        assert!((w[1] + 1.0).abs() < 1e-12);
    }
}
