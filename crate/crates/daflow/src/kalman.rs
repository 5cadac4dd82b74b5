//! Closed-form Kalman filter for linear-Gaussian models, recorded on the
//! tape so the exact log-likelihood and its exact parameter gradient come
//! out of the same machinery as the ensemble estimates. This is the oracle
//! side of the convergence-rate studies and the reference-MLE solver.

use crate::ad::{NodeId, Tape, Value};
use crate::error::{Error, Result};
use crate::models::{
    linear_matrix_node, prepare_noise, register_theta, StateSpaceModel, ThetaParams,
    TransitionSpec,
};
use crate::opt::{BlockRates, Optimizer, OptimizerKind};

#[derive(Debug, Clone, Copy)]
pub struct KfState {
    pub mean: NodeId,
    pub cov: NodeId,
    pub loglik: NodeId,
}

fn symmetrize(tape: &mut Tape, a: NodeId) -> Result<NodeId> {
    let at = tape.transpose(a)?;
    let s = tape.add(a, at)?;
    tape.scale(s, 0.5)
}

/// One forecast/analysis step with the likelihood increment
/// log N(y; H mbar, H Cbar H^T + R). The analysis covariance uses the
/// Joseph form (I-KH) Cbar (I-KH)^T + K R K^T, which stays PSD in floating
/// point over long horizons where the plain form does not.
pub fn kf_step(
    tape: &mut Tape,
    state: &KfState,
    a: NodeId,
    q: NodeId,
    h: NodeId,
    r: NodeId,
    y: &Value,
) -> Result<KfState> {
    // forecast moments
    let mbar = tape.matmul(a, state.mean)?;
    let ac = tape.matmul(a, state.cov)?;
    let at = tape.transpose(a)?;
    let acat = tape.matmul(ac, at)?;
    let cbar = tape.add(acat, q)?;
    let cbar = symmetrize(tape, cbar)?;

    // innovation moments and likelihood increment
    let hm = tape.matmul(h, mbar)?;
    let ht = tape.transpose(h)?;
    let cht = tape.matmul(cbar, ht)?;
    let hcht = tape.matmul(h, cht)?;
    let s = tape.add(hcht, r)?;
    let y_leaf = tape.constant(y.clone())?;
    let inc = tape.gaussian_logpdf(y_leaf, hm, s)?;
    let loglik = tape.add(state.loglik, inc)?;

    // gain and analysis
    let cht_t = tape.transpose(cht)?;
    let kt = tape.psd_solve(s, cht_t)?;
    let k = tape.transpose(kt)?;
    let resid = tape.sub(y_leaf, hm)?;
    let mean = tape.matmul(k, resid)?;
    let mean = tape.add(mbar, mean)?;

    let d = tape.value(state.mean).nrows();
    let eye = tape.constant(Value::eye(d))?;
    let kh = tape.matmul(k, h)?;
    let ikh = tape.sub(eye, kh)?;
    let ikh_c = tape.matmul(ikh, cbar)?;
    let ikh_t = tape.transpose(ikh)?;
    let joseph = tape.matmul(ikh_c, ikh_t)?;
    let kr = tape.matmul(k, r)?;
    let krk = tape.matmul(kr, kt)?;
    let cov = tape.add(joseph, krk)?;
    let cov = symmetrize(tape, cov)?;

    Ok(KfState { mean, cov, loglik })
}

/// Record the full filter pass for a linear-Gaussian model and return the
/// final state (the loglik node is differentiable in theta).
pub fn run_kf(
    tape: &mut Tape,
    model: &StateSpaceModel,
    theta_nodes: &crate::models::ThetaNodes,
    obs: &[Value],
) -> Result<KfState> {
    if !matches!(model.transition, TransitionSpec::LinearBanded) {
        return Err(Error::Domain(
            "exact Kalman filtering needs the banded linear transition".into(),
        ));
    }
    model.validate()?;
    let alpha = theta_nodes
        .alpha
        .ok_or_else(|| Error::Domain("linear model needs alpha".into()))?;
    let a = linear_matrix_node(tape, alpha, model.d_x)?;
    let noise = prepare_noise(tape, model, theta_nodes)?;
    let h = tape.constant(model.h.clone())?;
    let r = tape.constant(model.r.clone())?;
    let mut state = KfState {
        mean: tape.constant(model.init_mean.clone())?,
        cov: tape.constant(model.init_cov.clone())?,
        loglik: tape.const_scalar(0.0)?,
    };
    for (idx, y) in obs.iter().enumerate() {
        state = kf_step(tape, &state, a, noise.q, h, r, y).map_err(|e| e.at_step(idx + 1))?;
    }
    Ok(state)
}

/// Exact log-likelihood value.
pub fn exact_loglik(model: &StateSpaceModel, theta: &ThetaParams, obs: &[Value]) -> Result<f64> {
    let mut tape = Tape::new();
    let nodes = register_theta(&mut tape, theta)?;
    let state = run_kf(&mut tape, model, &nodes, obs)?;
    Ok(tape.value(state.loglik)[(0, 0)])
}

/// Exact log-likelihood and its exact gradient in the internal theta
/// coordinates (noise blocks are log- or softplus-parameterized).
pub fn exact_loglik_and_grad(
    model: &StateSpaceModel,
    theta: &ThetaParams,
    obs: &[Value],
) -> Result<(f64, ThetaParams)> {
    let mut tape = Tape::new();
    let nodes = register_theta(&mut tape, theta)?;
    let state = run_kf(&mut tape, model, &nodes, obs)?;
    let value = tape.value(state.loglik)[(0, 0)];
    let grads = tape.backward(state.loglik)?;
    let grad = crate::models::extract_gradient(&tape, &grads, &nodes, theta);
    Ok((value, grad))
}

#[derive(Debug, Clone)]
pub struct MleOptions {
    pub grad_tol: f64,
    pub max_iters: usize,
    pub rates: BlockRates,
    /// polynomial decay applied after `decay_after` iterations
    pub decay_after: usize,
    pub decay_tau: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            max_iters: 200_000,
            rates: BlockRates { alpha: 0.02, beta: 0.02 },
            decay_after: 2_000,
            decay_tau: 0.6,
        }
    }
}

/// Gradient-ascent (Adam) on the exact log-likelihood until the gradient
/// norm drops below `grad_tol`; the reference point the learned parameters
/// are measured against.
pub fn reference_mle(
    model: &StateSpaceModel,
    obs: &[Value],
    theta0: &ThetaParams,
    opts: &MleOptions,
) -> Result<ThetaParams> {
    let mut theta = theta0.clone();
    let mut opt = Optimizer::new(OptimizerKind::Adam, opts.rates, theta.len());
    for iter in 1..=opts.max_iters {
        let (_, grad) = exact_loglik_and_grad(model, &theta, obs)?;
        let norm = grad.flatten().iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < opts.grad_tol {
            return Ok(theta);
        }
        let scale = crate::opt::schedule_eta(iter, 1.0, opts.decay_after, opts.decay_tau);
        opt.update(&mut theta, &grad, scale)?;
    }
    Err(Error::NonConvergence { iters: opts.max_iters })
}
