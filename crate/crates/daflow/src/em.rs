//! Expectation-maximization baseline: the E-step runs the ensemble filter
//! and a fixed-lag perturbed-observation smoother on plain values, the
//! M-step updates Q in closed form and ascends the Monte-Carlo surrogate in
//! alpha with the particles held fixed. Gradients never flow through the
//! filter map — the defining contrast with the differentiable-filter
//! training path.

use ndarray::Array2;

use crate::ad::linalg::psd_solve_plain;
use crate::ad::{Tape, Value};
use crate::enkf::{run_filter, EnkfConfig, InitialEnsemble, StepRecord};
use crate::error::{Error, Result};
use crate::models::{
    apply_transition_plain, inv_softplus, prepare_transition, register_theta, NoiseSpec,
    StateSpaceModel, ThetaParams,
};
use crate::opt::{schedule_eta, BlockRates, Optimizer, OptimizerKind};

/// Smoothed particle paths x_{0:T}: plain float arrays, frozen after the
/// smoothing pass.
#[derive(Debug, Clone)]
pub struct SmoothedHistory {
    pub particles: Vec<Value>,
    pub lag: usize,
}

/// Fixed-lag perturbed-observation smoother. For each step t and lag
/// s <= S, the ensemble at t - s is pulled toward the observation at t with
/// the gain built from the empirical cross-covariance against the forecast
/// at t; the filter's innovation draws are reused. Lag 0 reproduces the
/// filter output exactly.
pub fn enks_fixed_lag(
    initial: &Value,
    history: &[StepRecord],
    lag: usize,
    h: &Array2<f64>,
) -> Result<SmoothedHistory> {
    let t_len = history.len();
    if lag > t_len {
        return Err(Error::Domain(format!(
            "smoother lag {lag} exceeds sequence length {t_len}"
        )));
    }
    let mut particles: Vec<Value> = Vec::with_capacity(t_len + 1);
    particles.push(initial.clone());
    for rec in history {
        particles.push(rec.analysis.clone());
    }
    if lag == 0 {
        return Ok(SmoothedHistory { particles, lag });
    }
    let n = initial.ncols();
    let scale = 1.0 / (n as f64 - 1.0);
    for t in 1..=t_len {
        let rec = &history[t - 1];
        let hb = h.dot(&center(&rec.forecast));
        for s in 1..=lag.min(t) {
            let idx = t - s;
            let lag_centered = center(&particles[idx]);
            // cross-cov against the forecast, projected: C_{t-s,t} H^T
            let cht = lag_centered.dot(&hb.t()) * scale;
            // gain K = C_{t-s,t} H^T S_t^{-1}; the stored innovation
            // covariance already includes taper and inflation
            let kt = psd_solve_plain(&rec.innov_cov, &cht.t().to_owned(), "enks_fixed_lag")?;
            let update = kt.t().dot(&rec.innovation);
            particles[idx] = &particles[idx] + &update;
        }
    }
    Ok(SmoothedHistory { particles, lag })
}

fn center(x: &Value) -> Value {
    let n = x.ncols() as f64;
    let mean = x.sum_axis(ndarray::Axis(1)) / n;
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        col -= &mean;
    }
    out
}

/// Closed-form covariance update: the mean outer product of the one-step
/// transition residuals over all particles and times (and sequences).
pub fn em_q_update(
    model: &StateSpaceModel,
    alpha: &[f64],
    histories: &[&SmoothedHistory],
) -> Result<Array2<f64>> {
    let d = model.d_x;
    let mut q = Array2::<f64>::zeros((d, d));
    let mut count = 0usize;
    for hist in histories {
        for t in 1..hist.particles.len() {
            let fx = apply_transition_plain(&model.transition, alpha, &hist.particles[t - 1])?;
            let resid = &hist.particles[t] - &fx;
            q = q + resid.dot(&resid.t());
            count += resid.ncols();
        }
    }
    if count == 0 {
        return Err(Error::Domain("covariance update needs at least one transition".into()));
    }
    Ok(q / count as f64)
}

/// Objective and alpha-gradient of the Monte-Carlo surrogate
/// (1/N) sum_{n,t} log N(x_t^n; F_alpha(x_{t-1}^n), Q) over one block of
/// columns. Particles enter the tape as constant leaves (E-step detachment);
/// only the quadratic part depends on alpha.
pub fn m_step_objective_chunk(
    model: &StateSpaceModel,
    alpha: &[f64],
    q: &Array2<f64>,
    xprev: &Value,
    xcur: &Value,
    n_particles: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let theta = ThetaParams {
        alpha: alpha.to_vec(),
        beta: vec![],
    };
    let mut probe = StateSpaceModel {
        noise: NoiseSpec::Fixed(Array2::eye(model.d_x)),
        ..model.clone()
    };
    probe.d_y = model.d_y;
    let nodes = register_theta(&mut tape, &theta)?;
    let trans = prepare_transition(&mut tape, &probe, &nodes)?;
    let xp = tape.constant(xprev.clone())?;
    let xc = tape.constant(xcur.clone())?;
    let fx = trans.apply(&mut tape, xp)?;
    let resid = tape.sub(xc, fx)?;
    let qc = tape.constant(q.clone())?;
    let z = tape.psd_solve(qc, resid)?;
    let quad = tape.hadamard(resid, z)?;
    let quad = tape.sum(quad)?;
    let obj = tape.scale(quad, -0.5 / n_particles as f64)?;
    let value = tape.value(obj)[(0, 0)];
    let grads = tape.backward(obj)?;
    let grad = match nodes.alpha {
        Some(a) => grads.wrt_or_zero(&tape, a).iter().copied().collect(),
        None => vec![],
    };
    // the particle leaves are constants: the backward pass must not have
    // touched them
    debug_assert!(grads.wrt(xp).is_none() && grads.wrt(xc).is_none());
    Ok((value, grad))
}

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub filter: EnkfConfig,
    pub lag: usize,
    /// inner gradient-ascent steps per outer iteration
    pub j_steps: usize,
    pub eta0: f64,
    pub i0: usize,
    pub tau: f64,
    /// columns per tape chunk in the M-step gradient accumulation
    pub chunk_cols: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            filter: EnkfConfig::default(),
            lag: 0,
            j_steps: 3,
            eta0: 0.1,
            i0: 10,
            tau: 1.0,
            chunk_cols: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmRecord {
    pub iteration: usize,
    pub filter_loglik: f64,
    pub surrogate: f64,
    pub theta: ThetaParams,
}

/// Alternate E (filter + fixed-lag smoother) and M (closed-form Q, J ascent
/// steps on alpha) for `iterations` rounds over one or more observation
/// sequences.
pub fn run_em(
    model: &StateSpaceModel,
    theta0: &ThetaParams,
    obs_seqs: &[Vec<Value>],
    iterations: usize,
    config: &EmConfig,
    master_seed: u64,
) -> Result<(ThetaParams, Vec<EmRecord>)> {
    if !matches!(model.noise, NoiseSpec::DiagSoftplus) {
        return Err(Error::Domain(
            "the EM baseline updates diagonal noise models (Q projected to its diagonal)".into(),
        ));
    }
    let mut theta = theta0.clone();
    let mut records = Vec::with_capacity(iterations);
    let mut opt = Optimizer::new(
        OptimizerKind::Adam,
        BlockRates { alpha: 1.0, beta: 1.0 },
        theta.alpha.len(),
    );
    let mut cfg = config.filter.clone();
    cfg.store_history = true;

    for k in 1..=iterations {
        // E-step: filter + smooth each sequence with this iteration's theta
        let mut smoothed = Vec::with_capacity(obs_seqs.len());
        let mut filter_ll = 0.0;
        for (s, obs) in obs_seqs.iter().enumerate() {
            let mut rng = crate::rng::substream(master_seed, "em", &[k as u64, s as u64]);
            let mut tape = Tape::new();
            let nodes = register_theta(&mut tape, &theta)?;
            let run = run_filter(
                &mut tape,
                model,
                &nodes,
                obs,
                InitialEnsemble::Sample,
                &cfg,
                &mut rng,
            )
            .map_err(|e| Error::FilterDiverged {
                iter: k,
                detail: e.to_string(),
            })?;
            filter_ll += tape.value(run.loglik)[(0, 0)];
            let history = run.history.expect("history stored");
            smoothed.push(enks_fixed_lag(&run.initial, &history, config.lag, &model.h)?);
        }
        let refs: Vec<&SmoothedHistory> = smoothed.iter().collect();

        // M-step: closed-form Q on the residuals, projected to the diagonal
        let q_full = em_q_update(model, &theta.alpha, &refs)?;
        let mut q_diag = Array2::<f64>::zeros((model.d_x, model.d_x));
        for i in 0..model.d_x {
            let qi = q_full[(i, i)].max(1e-20);
            q_diag[(i, i)] = qi;
            theta.beta[i] = inv_softplus(qi.sqrt());
        }

        // inner ascent on alpha with particles and Q fixed
        let eta = schedule_eta(k, config.eta0, config.i0, config.tau);
        let mut surrogate = 0.0;
        for _ in 0..config.j_steps {
            let mut grad = vec![0.0; theta.alpha.len()];
            surrogate = 0.0;
            for hist in &smoothed {
                let t_len = hist.particles.len() - 1;
                let n = hist.particles[0].ncols();
                let total_cols = t_len * n;
                let per_chunk = (config.chunk_cols / n).max(1);
                let mut t0 = 1usize;
                while t0 <= t_len {
                    let t1 = (t0 + per_chunk - 1).min(t_len);
                    let cols = (t1 - t0 + 1) * n;
                    let mut xprev = Value::zeros((model.d_x, cols));
                    let mut xcur = Value::zeros((model.d_x, cols));
                    for (block, t) in (t0..=t1).enumerate() {
                        let dst = block * n;
                        xprev
                            .slice_mut(ndarray::s![.., dst..dst + n])
                            .assign(&hist.particles[t - 1]);
                        xcur
                            .slice_mut(ndarray::s![.., dst..dst + n])
                            .assign(&hist.particles[t]);
                    }
                    let (val, g) =
                        m_step_objective_chunk(model, &theta.alpha, &q_diag, &xprev, &xcur, n)?;
                    surrogate += val;
                    for (gi, gc) in grad.iter_mut().zip(&g) {
                        *gi += gc;
                    }
                    t0 = t1 + 1;
                }
                let _ = total_cols;
            }
            let mut alpha_theta = ThetaParams {
                alpha: theta.alpha.clone(),
                beta: vec![],
            };
            let grad_theta = ThetaParams { alpha: grad, beta: vec![] };
            opt.update(&mut alpha_theta, &grad_theta, eta)?;
            theta.alpha = alpha_theta.alpha;
        }

        records.push(EmRecord {
            iteration: k,
            filter_loglik: filter_ll,
            surrogate,
            theta: theta.clone(),
        });
    }
    Ok((theta, records))
}
