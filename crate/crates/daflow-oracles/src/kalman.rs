//! Closed-form Kalman filtering/smoothing oracles for small linear-Gaussian
//! models, written with naive nested-Vec matrices and Gaussian elimination so
//! they share no kernels with the code under test.
//!
//! The filter is generic over the scalar type: `f64` for plain evaluation and
//! `Complex64` for complex-step derivatives (Im f(theta + i h)/h, h = 1e-20).

use num_complex::Complex64;

pub trait Scalar:
    Copy
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn zero() -> Self;
    fn one() -> Self;
    fn ln(self) -> Self;
    /// squared magnitude, for pivot selection
    fn mag2(self) -> f64;
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn mag2(self) -> f64 {
        self * self
    }
}

impl Scalar for Complex64 {
    fn from_f64(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn one() -> Self {
        Complex64::new(1.0, 0.0)
    }
    fn ln(self) -> Self {
        Complex64::ln(self)
    }
    fn mag2(self) -> f64 {
        self.norm_sqr()
    }
}

pub type Mat<S> = Vec<Vec<S>>;

pub fn mat_from<S: Scalar>(rows: &[Vec<f64>]) -> Mat<S> {
    rows.iter()
        .map(|r| r.iter().map(|&x| S::from_f64(x)).collect())
        .collect()
}

pub fn eye<S: Scalar>(d: usize) -> Mat<S> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { S::one() } else { S::zero() }).collect())
        .collect()
}

pub fn zeros<S: Scalar>(r: usize, c: usize) -> Mat<S> {
    vec![vec![S::zero(); c]; r]
}

pub fn matmul<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = zeros(n, m);
    for i in 0..n {
        for l in 0..k {
            let ail = a[i][l];
            for j in 0..m {
                out[i][j] = out[i][j] + ail * b[l][j];
            }
        }
    }
    out
}

pub fn transpose<S: Scalar>(a: &Mat<S>) -> Mat<S> {
    let (n, m) = (a.len(), a[0].len());
    let mut out = zeros(m, n);
    for i in 0..n {
        for j in 0..m {
            out[j][i] = a[i][j];
        }
    }
    out
}

pub fn add<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| x + y).collect())
        .collect()
}

pub fn sub<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| x - y).collect())
        .collect()
}

/// Solve A X = B by unpivoted Gaussian elimination; also returns ln det A
/// (complex logarithm in the complex case). Callers only pass positive
/// definite matrices, for which unpivoted elimination has strictly positive
/// pivots and the log determinant is the sum of pivot logs.
pub fn solve_logdet<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> (Mat<S>, S) {
    let n = a.len();
    let m = b[0].len();
    let mut aug: Mat<S> = a
        .iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().chain(rb.iter()).copied().collect())
        .collect();
    let mut logdet = S::zero();
    for col in 0..n {
        let p = aug[col][col];
        assert!(p.mag2() > 0.0, "non-positive pivot in oracle solve");
        logdet = logdet + p.ln();
        for i in (col + 1)..n {
            let f = aug[i][col] / p;
            for j in col..(n + m) {
                let v = aug[col][j];
                aug[i][j] = aug[i][j] - f * v;
            }
        }
    }
    let mut x = zeros(n, m);
    for j in 0..m {
        for i in (0..n).rev() {
            let mut s = aug[i][n + j];
            for k in (i + 1)..n {
                s = s - aug[i][k] * x[k][j];
            }
            x[i][j] = s / aug[i][i];
        }
    }
    (x, logdet)
}

/// Linear-Gaussian SSM spec for the oracle recursions.
pub struct LinearModel<S> {
    pub a: Mat<S>,
    pub q: Mat<S>,
    pub h: Mat<S>,
    pub r: Mat<S>,
    pub m0: Vec<S>,
    pub c0: Mat<S>,
}

fn col<S: Scalar>(v: &[S]) -> Mat<S> {
    v.iter().map(|&x| vec![x]).collect()
}

/// Exact data log-likelihood sum_t log N(y_t; H mbar_t, H Cbar_t H^T + R).
pub fn kf_loglik<S: Scalar>(model: &LinearModel<S>, ys: &[Vec<S>]) -> S {
    let d_y = model.h.len();
    let mut m = col(&model.m0);
    let mut c = model.c0.clone();
    let mut loglik = S::zero();
    let ln2pi = S::from_f64((2.0 * std::f64::consts::PI).ln());
    for y in ys {
        // forecast
        let mbar = matmul(&model.a, &m);
        let cbar = add(&matmul(&matmul(&model.a, &c), &transpose(&model.a)), &model.q);
        // innovation moments
        let hcbar = matmul(&model.h, &cbar);
        let s = add(&matmul(&hcbar, &transpose(&model.h)), &model.r);
        let resid = sub(&col(y), &matmul(&model.h, &mbar));
        let (sinv_r, logdet_s) = solve_logdet(&s, &resid);
        let mut quad = S::zero();
        for i in 0..d_y {
            quad = quad + resid[i][0] * sinv_r[i][0];
        }
        let half = S::from_f64(-0.5);
        loglik = loglik + half * (S::from_f64(d_y as f64) * ln2pi + logdet_s + quad);
        // analysis (plain covariance form; d <= 3 here)
        let (sinv_hcbar, _) = solve_logdet(&s, &hcbar);
        let k = transpose(&sinv_hcbar); // Cbar H^T S^{-1}
        let m_new = add(&mbar, &matmul(&k, &resid));
        let c_new = sub(&cbar, &matmul(&k, &hcbar));
        m = m_new;
        c = c_new;
    }
    loglik
}

/// Filter pass retaining the per-step moments needed by the RTS recursion.
pub struct FilterPass {
    pub filt_means: Vec<Vec<f64>>,
    pub filt_covs: Vec<Mat<f64>>,
    pub pred_means: Vec<Vec<f64>>,
    pub pred_covs: Vec<Mat<f64>>,
}

pub fn kf_filter_pass(model: &LinearModel<f64>, ys: &[Vec<f64>]) -> FilterPass {
    let mut m = col(&model.m0);
    let mut c = model.c0.clone();
    let mut out = FilterPass {
        filt_means: vec![model.m0.clone()],
        filt_covs: vec![model.c0.clone()],
        pred_means: Vec::new(),
        pred_covs: Vec::new(),
    };
    for y in ys {
        let mbar = matmul(&model.a, &m);
        let cbar = add(&matmul(&matmul(&model.a, &c), &transpose(&model.a)), &model.q);
        out.pred_means.push(mbar.iter().map(|r| r[0]).collect());
        out.pred_covs.push(cbar.clone());
        let hcbar = matmul(&model.h, &cbar);
        let s = add(&matmul(&hcbar, &transpose(&model.h)), &model.r);
        let resid = sub(&col(y), &matmul(&model.h, &mbar));
        let (sinv_hcbar, _) = solve_logdet(&s, &hcbar);
        let k = transpose(&sinv_hcbar);
        m = add(&mbar, &matmul(&k, &resid));
        c = sub(&cbar, &matmul(&k, &hcbar));
        out.filt_means.push(m.iter().map(|r| r[0]).collect());
        out.filt_covs.push(c.clone());
    }
    out
}

/// Rauch-Tung-Striebel smoother. Returns smoothed means and covariances at
/// t = 0..=T.
pub fn rts_smoother(model: &LinearModel<f64>, ys: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Mat<f64>>) {
    let pass = kf_filter_pass(model, ys);
    let t_len = ys.len();
    let mut means = pass.filt_means.clone();
    let mut covs = pass.filt_covs.clone();
    for t in (0..t_len).rev() {
        // gain G = C_{t|t} A^T Cbar_{t+1}^{-1}
        let cat = matmul(&pass.filt_covs[t], &transpose(&model.a));
        let (pinv_cat_t, _) = solve_logdet(&pass.pred_covs[t], &transpose(&cat));
        let g = transpose(&pinv_cat_t);
        let dm: Vec<f64> = means[t + 1]
            .iter()
            .zip(&pass.pred_means[t])
            .map(|(a, b)| a - b)
            .collect();
        let corr = matmul(&g, &col(&dm));
        for i in 0..means[t].len() {
            means[t][i] = pass.filt_means[t][i] + corr[i][0];
        }
        let dc = sub(&covs[t + 1], &pass.pred_covs[t]);
        let upd = matmul(&matmul(&g, &dc), &transpose(&g));
        covs[t] = add(&pass.filt_covs[t], &upd);
    }
    (means, covs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(a: f64, q: f64, r: f64, m0: f64, c0: f64) -> LinearModel<f64> {
        LinearModel {
            a: vec![vec![a]],
            q: vec![vec![q]],
            h: vec![vec![1.0]],
            r: vec![vec![r]],
            m0: vec![m0],
            c0: vec![vec![c0]],
        }
    }

    #[test]
    fn scalar_one_step_loglik() {
        // A=0, Q=1, H=1, R=1, m0=0, C0=1, y1=0: predictive N(0, 2)
        let model = scalar_model(0.0, 1.0, 1.0, 0.0, 1.0);
        let ll = kf_loglik(&model, &[vec![0.0]]);
        let expect = -0.5 * (4.0 * std::f64::consts::PI).ln();
        assert!((ll - expect).abs() < 1e-12);
        assert!((ll - (-1.2655121)).abs() < 1e-6);
    }

    #[test]
    fn complex_step_matches_fd() {
        // derivative of loglik w.r.t. A in the scalar model
        let ys = vec![vec![0.4], vec![-0.3], vec![0.9]];
        let f = |a: f64| kf_loglik(&scalar_model(a, 0.5, 0.8, 0.1, 1.0), &ys);
        let h = 1e-6;
        let fd = (f(0.7 + h) - f(0.7 - h)) / (2.0 * h);
        let ysc: Vec<Vec<Complex64>> = ys
            .iter()
            .map(|r| r.iter().map(|&x| Complex64::new(x, 0.0)).collect())
            .collect();
        let model_c = LinearModel::<Complex64> {
            a: vec![vec![Complex64::new(0.7, 1e-20)]],
            q: mat_from(&[vec![0.5]]),
            h: mat_from(&[vec![1.0]]),
            r: mat_from(&[vec![0.8]]),
            m0: vec![Complex64::new(0.1, 0.0)],
            c0: mat_from(&[vec![1.0]]),
        };
        let cs = kf_loglik(&model_c, &ysc).im / 1e-20;
        assert!((fd - cs).abs() < 1e-7 * (1.0 + cs.abs()));
    }

    #[test]
    fn rts_single_step_equals_filter() {
        let model = scalar_model(0.9, 0.3, 0.5, 0.0, 1.0);
        let ys = vec![vec![0.7]];
        let (means, _) = rts_smoother(&model, &ys);
        let pass = kf_filter_pass(&model, &ys);
        assert!((means[1][0] - pass.filt_means[1][0]).abs() < 1e-14);
    }

    #[test]
    fn deterministic_chain_smooths_to_initial_mean() {
        // Q=0, C0=0: the chain is deterministic from m0
        let model = scalar_model(1.0, 0.0, 1.0, 0.25, 1e-14);
        let ys = vec![vec![0.5], vec![0.1], vec![0.3]];
        let (means, _) = rts_smoother(&model, &ys);
        for m in &means {
            assert!((m[0] - 0.25).abs() < 1e-6);
        }
    }
}
