//! Optimal-proposal particle filter with a differentiable log-likelihood
//! estimate. The proposal and weights use the closed Gaussian forms
//! S = H Q H^T + R, K = Q H^T S^{-1}; resampling is multinomial every step,
//! and resampled particles re-enter the tape as constant leaves so no
//! gradient flows through the ancestor selection.


use crate::ad::linalg::cholesky_psd;
use crate::ad::{NodeId, Tape, Value};
use crate::enkf::{InitialEnsemble, StepDiag};
use crate::error::{Error, Result};
use crate::models::{
    prepare_noise, prepare_transition, StateSpaceModel, ThetaNodes, TransitionCtx,
};
use crate::rng::NoiseSource;

#[derive(Debug, Clone)]
pub struct PfConfig {
    pub n_particles: usize,
    /// draw proposal noise from N(0, Q) exactly as the algorithm listing
    /// writes it, instead of the conditional covariance (I - KH) Q that pairs
    /// with the marginal weight formula
    pub paper_literal_proposal: bool,
    /// systematic instead of multinomial resampling
    pub systematic_resampling: bool,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self {
            n_particles: 100,
            paper_literal_proposal: false,
            systematic_resampling: false,
        }
    }
}

impl PfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::Domain("particle filter needs N >= 1".into()));
        }
        Ok(())
    }
}

/// Particles plus normalized log-weights (a 1 x N row node); the normalized
/// weights satisfy logsumexp = 0.
#[derive(Debug, Clone, Copy)]
pub struct WeightedEnsemble {
    pub particles: NodeId,
    pub logweights: NodeId,
    pub t: usize,
}

#[derive(Debug)]
pub struct PfRun {
    pub ensemble: WeightedEnsemble,
    pub loglik: NodeId,
    pub initial: Value,
    pub diagnostics: Vec<StepDiag>,
}

/// Proposal/weight machinery precomputed once per run.
pub struct PfCtx {
    trans: TransitionCtx,
    h: NodeId,
    s: NodeId,
    k: NodeId,
    ikh: NodeId,
    /// None when the proposal covariance is exactly zero (deterministic move)
    prop_sqrt: Option<NodeId>,
    /// -(d_y ln 2pi + ln det S) / 2, the log-weight offset
    logw_offset: NodeId,
}

pub fn prepare_pf(
    tape: &mut Tape,
    model: &StateSpaceModel,
    theta: &ThetaNodes,
    config: &PfConfig,
) -> Result<PfCtx> {
    model.validate()?;
    let noise = prepare_noise(tape, model, theta)?;
    let trans = prepare_transition(tape, model, theta)?;
    let h = tape.constant(model.h.clone())?;
    let r = tape.constant(model.r.clone())?;
    let ht = tape.transpose(h)?;
    let qht = tape.matmul(noise.q, ht)?;
    let hqht = tape.matmul(h, qht)?;
    let s = tape.add(hqht, r)?;
    // K = Q H^T S^{-1} via K^T = S^{-1} (Q H^T)^T
    let qht_t = tape.transpose(qht)?;
    let kt = tape.psd_solve(s, qht_t)?;
    let k = tape.transpose(kt)?;
    let eye = tape.constant(Value::eye(model.d_x))?;
    let kh = tape.matmul(k, h)?;
    let ikh = tape.sub(eye, kh)?;

    let prop_cov = if config.paper_literal_proposal {
        noise.q
    } else {
        // conditional covariance (I - KH) Q of the optimal proposal
        tape.matmul(ikh, noise.q)?
    };
    let prop_sqrt = if tape.value(prop_cov).iter().all(|&v| v == 0.0) {
        None // exactly deterministic transition
    } else {
        Some(tape.cholesky(prop_cov)?)
    };

    let ld = tape.logdet(s)?;
    let cst = tape.const_scalar(model.d_y as f64 * (2.0 * std::f64::consts::PI).ln())?;
    let t = tape.add(ld, cst)?;
    let logw_offset = tape.scale(t, -0.5)?;

    Ok(PfCtx {
        trans,
        h,
        s,
        k,
        ikh,
        prop_sqrt,
        logw_offset,
    })
}

/// One proposal step: returns the proposed particles and the unnormalized
/// log-weights log N(y; H F(x), S) as a 1 x N node.
pub fn optimal_proposal_step(
    tape: &mut Tape,
    ctx: &PfCtx,
    particles: NodeId,
    y: &Value,
    noise: &mut dyn NoiseSource,
) -> Result<(NodeId, NodeId)> {
    let (d_x, n) = tape.value(particles).dim();
    let fx = ctx.trans.apply(tape, particles)?;
    let y_leaf = tape.constant(y.clone())?;
    let ybc = tape.broadcast_col(y_leaf, n)?;

    // proposal mean (I - KH) F + K y, plus the reparameterized draw
    let mean_a = tape.matmul(ctx.ikh, fx)?;
    let ky = tape.matmul(ctx.k, ybc)?;
    let mut proposed = tape.add(mean_a, ky)?;
    if let Some(lp) = ctx.prop_sqrt {
        let eps = tape.constant(noise.standard_normal(d_x, n))?;
        let jitter = tape.matmul(lp, eps)?;
        proposed = tape.add(proposed, jitter)?;
    }

    // unnormalized log-weights
    let hf = tape.matmul(ctx.h, fx)?;
    let resid = tape.sub(ybc, hf)?;
    let z = tape.psd_solve(ctx.s, resid)?;
    let quad = tape.hadamard(resid, z)?;
    let quad = tape.col_sums(quad)?;
    let half_quad = tape.scale(quad, -0.5)?;
    let ones = tape.constant(Value::from_elem((1, n), 1.0))?;
    let offset = tape.smul(ctx.logw_offset, ones)?;
    let logw = tape.add(half_quad, offset)?;
    Ok((proposed, logw))
}

/// Multinomial ancestor draw from normalized weights.
pub fn multinomial_ancestors(
    weights: &[f64],
    draws: usize,
    noise: &mut dyn NoiseSource,
) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cdf.push(acc);
    }
    let total = *cdf.last().expect("nonempty weights");
    (0..draws)
        .map(|_| {
            let u = noise.uniform() * total;
            match cdf.binary_search_by(|c| c.partial_cmp(&u).expect("finite")) {
                Ok(i) => i,
                Err(i) => i.min(weights.len() - 1),
            }
        })
        .collect()
}

/// Systematic (stratified comb) ancestor draw.
pub fn systematic_ancestors(
    weights: &[f64],
    draws: usize,
    noise: &mut dyn NoiseSource,
) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let step = total / draws as f64;
    let start = noise.uniform() * step;
    let mut out = Vec::with_capacity(draws);
    let mut acc = weights[0];
    let mut idx = 0usize;
    for d in 0..draws {
        let u = start + d as f64 * step;
        while u > acc && idx + 1 < weights.len() {
            idx += 1;
            acc += weights[idx];
        }
        out.push(idx);
    }
    out
}

/// Normalized weights from an unnormalized log-weight row.
pub fn normalized_weights(logw: &Value) -> Result<Vec<f64>> {
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::WeightDegeneracy { t: 0 });
    }
    let unnorm: Vec<f64> = logw.iter().map(|&lw| (lw - m).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::WeightDegeneracy { t: 0 });
    }
    Ok(unnorm.into_iter().map(|w| w / total).collect())
}

/// Resample into an equally weighted ensemble. The selected columns re-enter
/// the tape as a constant leaf: the ancestor draw carries no gradient, and
/// downstream computations treat the values as fresh inputs.
pub fn resample(
    tape: &mut Tape,
    particles: NodeId,
    weights: &[f64],
    systematic: bool,
    noise: &mut dyn NoiseSource,
) -> Result<NodeId> {
    let values = tape.value(particles).clone();
    let n = values.ncols();
    let ancestors = if systematic {
        systematic_ancestors(weights, n, noise)
    } else {
        multinomial_ancestors(weights, n, noise)
    };
    let mut out = Value::zeros(values.dim());
    for (j, &a) in ancestors.iter().enumerate() {
        out.column_mut(j).assign(&values.column(a));
    }
    tape.constant(out)
}

/// Run the optimal-proposal filter, resampling every step, accumulating
/// L_PF = sum_t [logsumexp(log w_t) - ln N] (the standard unbiased estimator
/// given the uniform weights after each resampling).
pub fn run_pf(
    tape: &mut Tape,
    model: &StateSpaceModel,
    theta: &ThetaNodes,
    obs: &[Value],
    init: InitialEnsemble,
    config: &PfConfig,
    noise: &mut dyn NoiseSource,
) -> Result<PfRun> {
    config.validate()?;
    let n = config.n_particles;
    let d_x = model.d_x;
    let ctx = prepare_pf(tape, model, theta, config)?;

    let init_values = match init {
        InitialEnsemble::Given(x) => {
            if x.dim() != (d_x, n) {
                return Err(Error::Domain(format!(
                    "initial ensemble is {:?}, expected ({d_x}, {n})",
                    x.dim()
                )));
            }
            x.clone()
        }
        InitialEnsemble::Sample => {
            let l0 = cholesky_psd(&model.init_cov, "run_pf")?;
            let draws = noise.standard_normal(d_x, n);
            let mut x = l0.dot(&draws);
            for mut col in x.columns_mut() {
                col += &model.init_mean.column(0);
            }
            x
        }
    };

    let uniform_logw = Value::from_elem((1, n), -(n as f64).ln());
    let mut ensemble = WeightedEnsemble {
        particles: tape.constant(init_values.clone())?,
        logweights: tape.constant(uniform_logw.clone())?,
        t: 0,
    };
    let mut loglik = tape.const_scalar(0.0)?;
    let mut diagnostics = Vec::with_capacity(obs.len());

    for (idx, y) in obs.iter().enumerate() {
        let t = idx + 1;
        let step = (|| -> Result<(WeightedEnsemble, NodeId, StepDiag)> {
            let (proposed, logw) = optimal_proposal_step(tape, &ctx, ensemble.particles, y, noise)?;
            let weights =
                normalized_weights(tape.value(logw)).map_err(|_| Error::WeightDegeneracy { t })?;
            let lse = tape.logsumexp(logw)?;
            let shift = tape.const_scalar(-(n as f64).ln())?;
            let inc = tape.add(lse, shift)?;
            let new_loglik = tape.add(loglik, inc)?;
            let resampled = resample(tape, proposed, &weights, config.systematic_resampling, noise)?;
            let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
            let diag = StepDiag {
                t,
                mean_norm: {
                    let v = tape.value(resampled);
                    let n_f = v.ncols() as f64;
                    (0..v.nrows())
                        .map(|i| (v.row(i).sum() / n_f).powi(2))
                        .sum::<f64>()
                        .sqrt()
                },
                cov_trace: f64::NAN,
                increment: tape.value(inc)[(0, 0)],
                ess: Some(ess),
            };
            let lw = tape.constant(uniform_logw.clone())?;
            Ok((
                WeightedEnsemble {
                    particles: resampled,
                    logweights: lw,
                    t,
                },
                new_loglik,
                diag,
            ))
        })()
        .map_err(|e| match e {
            Error::WeightDegeneracy { .. } => Error::WeightDegeneracy { t },
            other => other.at_step(t),
        })?;
        ensemble = step.0;
        loglik = step.1;
        diagnostics.push(step.2);
    }

    Ok(PfRun {
        ensemble,
        loglik,
        initial: init_values,
        diagnostics,
    })
}

/// Value and parameter gradient of L_PF in one pass.
pub fn loglik_and_grad(
    model: &StateSpaceModel,
    theta: &crate::models::ThetaParams,
    obs: &[Value],
    config: &PfConfig,
    noise: &mut dyn NoiseSource,
) -> Result<(f64, crate::models::ThetaParams)> {
    let mut tape = Tape::new();
    let nodes = crate::models::register_theta(&mut tape, theta)?;
    let run = run_pf(&mut tape, model, &nodes, obs, InitialEnsemble::Sample, config, noise)?;
    let value = tape.value(run.loglik)[(0, 0)];
    let grads = tape.backward(run.loglik)?;
    let grad = crate::models::extract_gradient(&tape, &grads, &nodes, theta);
    Ok((value, grad))
}
