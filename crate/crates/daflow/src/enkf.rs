//! Perturbed-observation ensemble Kalman filter with differentiable
//! log-likelihood accumulation, covariance tapering, and inflation.
//!
//! Each run owns one tape and one noise stream. Noise draws enter the tape
//! as constant leaves (reparameterization: the beta-gradient flows through
//! the noise square root, never through the draws). Without tapering the
//! analysis works on centered factors and never materializes the d_x x d_x
//! covariance; with tapering (or when `dense_covariance` is set) the tapered
//! covariance is formed explicitly.

use ndarray::Array2;

use crate::ad::linalg::cholesky_psd;
use crate::ad::{NodeId, Tape, Value};
use crate::error::{Error, Result};
use crate::models::{
    prepare_noise, prepare_transition, NoiseCtx, StateSpaceModel, ThetaNodes, TransitionCtx,
};
use crate::rng::NoiseSource;

/// Equally weighted particles: a d_x x N node whose columns are particles.
#[derive(Debug, Clone, Copy)]
pub struct Ensemble {
    pub particles: NodeId,
    pub t: usize,
}

#[derive(Debug, Clone)]
pub struct EnkfConfig {
    pub ensemble_size: usize,
    pub taper_radius: Option<f64>,
    pub taper_circular: bool,
    /// covariance inflation factor zeta >= 0; the filter uses (1+zeta) C
    pub inflation: f64,
    pub store_history: bool,
    /// materialize the forecast covariance even without a taper; the
    /// all-ones-taper run is then bit-identical to the untapered one
    pub dense_covariance: bool,
}

impl Default for EnkfConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 50,
            taper_radius: None,
            taper_circular: false,
            inflation: 0.0,
            store_history: false,
            dense_covariance: false,
        }
    }
}

impl EnkfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(Error::Domain(format!(
                "ensemble needs N >= 2 (sample covariance divisor), got {}",
                self.ensemble_size
            )));
        }
        if let Some(r) = self.taper_radius {
            if !(r >= 1.0) {
                return Err(Error::Domain(format!("taper radius must be >= 1, got {r}")));
            }
        }
        if self.inflation < 0.0 {
            return Err(Error::Domain(format!(
                "inflation must be nonnegative, got {}",
                self.inflation
            )));
        }
        Ok(())
    }
}

/// Fifth-order piecewise-polynomial correlation value at normalized
/// distance z >= 0: 1 at 0, compactly supported on [0, 2).
pub fn gc_phi(z: f64) -> f64 {
    if z >= 2.0 {
        0.0
    } else if z <= 1.0 {
        1.0 - (5.0 / 3.0) * z.powi(2) + (5.0 / 8.0) * z.powi(3) + 0.5 * z.powi(4)
            - 0.25 * z.powi(5)
    } else {
        4.0 - 5.0 * z + (5.0 / 3.0) * z.powi(2) + (5.0 / 8.0) * z.powi(3) - 0.5 * z.powi(4)
            + (1.0 / 12.0) * z.powi(5)
            - 2.0 / (3.0 * z)
    }
}

/// Tapering matrix: [rho]_ij = phi(dist(i, j) / r) with unit diagonal and
/// entries vanishing for dist >= 2r. Distance is |i - j|, or the wrapped
/// distance when `circular` is set.
pub fn gaspari_cohn(d_x: usize, r: f64, circular: bool) -> Array2<f64> {
    let mut rho = Array2::zeros((d_x, d_x));
    for i in 0..d_x {
        for j in 0..d_x {
            let dist = (i as f64 - j as f64).abs();
            let dist = if circular {
                dist.min(d_x as f64 - dist)
            } else {
                dist
            };
            rho[(i, j)] = gc_phi(dist / r);
        }
    }
    rho
}

/// Forecast mean (divisor N) and centered factor W with C = W W^T
/// (divisor N - 1 baked into the scaling).
pub fn moments_factor(tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
    let n = tape.value(x).ncols();
    if n < 2 {
        return Err(Error::Domain("sample covariance needs N >= 2".into()));
    }
    let mean = tape.mean_cols(x)?;
    let mean_bc = tape.broadcast_col(mean, n)?;
    let centered = tape.sub(x, mean_bc)?;
    let w = tape.scale(centered, 1.0 / ((n - 1) as f64).sqrt())?;
    Ok((mean, w))
}

/// Empirical moments (mean, dense covariance) of an ensemble node.
pub fn empirical_moments(tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
    let (mean, w) = moments_factor(tape, x)?;
    let wt = tape.transpose(w)?;
    let cov = tape.matmul(w, wt)?;
    Ok((mean, cov))
}

/// Per-step diagnostics for the metrics sink.
#[derive(Debug, Clone)]
pub struct StepDiag {
    pub t: usize,
    pub mean_norm: f64,
    pub cov_trace: f64,
    pub increment: f64,
    pub ess: Option<f64>,
}

/// Frozen per-step values retained when `store_history` is set (the EM
/// smoother consumes these; they are plain values, not tape nodes).
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub forecast: Value,
    pub analysis: Value,
    /// perturbed innovation y_t + gamma^n - H xhat^n per particle
    pub innovation: Value,
    /// H Ctilde H^T + R actually used by the gain at this step
    pub innov_cov: Value,
}

#[derive(Debug)]
pub struct FilterRun {
    pub ensemble: Ensemble,
    pub loglik: NodeId,
    pub initial: Value,
    pub history: Option<Vec<StepRecord>>,
    pub diagnostics: Vec<StepDiag>,
}

pub enum InitialEnsemble<'a> {
    /// draw N particles from the model's Gaussian initial distribution
    Sample,
    /// use the given d_x x N matrix (TBPTT carry-over, tests)
    Given(&'a Value),
}

/// One forecast step: F_alpha applied column-wise plus S_beta eps with eps
/// drawn standard normal as a constant leaf.
pub fn forecast_step(
    tape: &mut Tape,
    trans: &TransitionCtx,
    noise_ctx: &NoiseCtx,
    ensemble: Ensemble,
    noise: &mut dyn NoiseSource,
) -> Result<Ensemble> {
    let (d_x, n) = tape.value(ensemble.particles).dim();
    let fx = trans.apply(tape, ensemble.particles)?;
    let eps = noise.standard_normal(d_x, n);
    let eps_leaf = tape.constant(eps)?;
    let noise_term = tape.matmul(noise_ctx.s, eps_leaf)?;
    let particles = tape.add(fx, noise_term)?;
    Ok(Ensemble {
        particles,
        t: ensemble.t + 1,
    })
}

struct AnalysisPieces {
    analysis: NodeId,
    mean: NodeId,
    innov_cov: NodeId,
    innovation: NodeId,
    cov_trace: f64,
}

#[allow(clippy::too_many_arguments)]
fn analysis_step(
    tape: &mut Tape,
    forecast: NodeId,
    y: &Value,
    h_leaf: NodeId,
    r_leaf: NodeId,
    rho_leaf: Option<NodeId>,
    config: &EnkfConfig,
    r_sqrt: &Value,
    noise: &mut dyn NoiseSource,
) -> Result<AnalysisPieces> {
    let n = tape.value(forecast).ncols();
    let d_y = y.nrows();
    let (mean, w) = moments_factor(tape, forecast)?;
    // taper first, then inflation: Ctilde = (1+zeta) (rho o C). Elementwise
    // scaling commutes, so the inflation is folded into the factor.
    let w = tape.scale(w, (1.0 + config.inflation).sqrt())?;

    let (cht, innov_cov, cov_trace) = if rho_leaf.is_some() || config.dense_covariance {
        let wt = tape.transpose(w)?;
        let cov = tape.matmul(w, wt)?;
        let cov = match rho_leaf {
            Some(rho) => tape.hadamard(rho, cov)?,
            None => cov,
        };
        let ht = tape.transpose(h_leaf)?;
        let cht = tape.matmul(cov, ht)?;
        let hcht = tape.matmul(h_leaf, cht)?;
        let innov_cov = tape.add(hcht, r_leaf)?;
        let trace = tape.value(cov).diag().sum();
        (cht, innov_cov, trace)
    } else {
        let hw = tape.matmul(h_leaf, w)?;
        let hwt = tape.transpose(hw)?;
        let cht = tape.matmul(w, hwt)?;
        let hcht = tape.matmul(hw, hwt)?;
        let innov_cov = tape.add(hcht, r_leaf)?;
        let trace = tape.value(w).iter().map(|v| v * v).sum();
        (cht, innov_cov, trace)
    };

    // gain K = Ctilde H^T (H Ctilde H^T + R)^{-1}, via K^T = S^{-1} (Ctilde H^T)^T
    let cht_t = tape.transpose(cht)?;
    let kt = tape.psd_solve(innov_cov, cht_t)?;
    let k = tape.transpose(kt)?;

    let gamma = r_sqrt.dot(&noise.standard_normal(d_y, n));
    let gamma_leaf = tape.constant(gamma)?;
    let y_leaf = tape.constant(y.clone())?;
    let ybc = tape.broadcast_col(y_leaf, n)?;
    let pert = tape.add(ybc, gamma_leaf)?;
    let hx = tape.matmul(h_leaf, forecast)?;
    let innovation = tape.sub(pert, hx)?;
    let update = tape.matmul(k, innovation)?;
    let analysis = tape.add(forecast, update)?;

    Ok(AnalysisPieces {
        analysis,
        mean,
        innov_cov,
        innovation,
        cov_trace,
    })
}

/// Run the filter over y_{1:T}, accumulating the differentiable
/// log-likelihood estimate sum_t log N(y_t; H mhat_t, H Ctilde_t H^T + R).
/// T = 0 returns the initial ensemble and a zero log-likelihood.
pub fn run_filter(
    tape: &mut Tape,
    model: &StateSpaceModel,
    theta: &ThetaNodes,
    obs: &[Value],
    init: InitialEnsemble,
    config: &EnkfConfig,
    noise: &mut dyn NoiseSource,
) -> Result<FilterRun> {
    config.validate()?;
    model.validate()?;
    let n = config.ensemble_size;
    let d_x = model.d_x;

    let noise_ctx = prepare_noise(tape, model, theta)?;
    let trans_ctx = prepare_transition(tape, model, theta)?;
    let h_leaf = tape.constant(model.h.clone())?;
    let r_leaf = tape.constant(model.r.clone())?;
    let r_sqrt = cholesky_psd(&model.r, "run_filter")?;
    let rho_leaf = match config.taper_radius {
        Some(r) => Some(tape.constant(gaspari_cohn(d_x, r, config.taper_circular))?),
        None => None,
    };

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
            let l0 = cholesky_psd(&model.init_cov, "run_filter")?;
            let draws = noise.standard_normal(d_x, n);
            let mut x = l0.dot(&draws);
            for mut col in x.columns_mut() {
                col += &model.init_mean.column(0);
            }
            x
        }
    };

    let mut ensemble = Ensemble {
        particles: tape.constant(init_values.clone())?,
        t: 0,
    };
    let mut loglik = tape.const_scalar(0.0)?;
    let mut history = config.store_history.then(Vec::new);
    let mut diagnostics = Vec::with_capacity(obs.len());

    for (idx, y) in obs.iter().enumerate() {
        let t = idx + 1;
        let step = (|| -> Result<(Ensemble, NodeId, Option<StepRecord>, StepDiag)> {
            let forecast = forecast_step(tape, &trans_ctx, &noise_ctx, ensemble, noise)?;
            let pieces = analysis_step(
                tape,
                forecast.particles,
                y,
                h_leaf,
                r_leaf,
                rho_leaf,
                config,
                &r_sqrt,
                noise,
            )?;
            let hm = tape.matmul(h_leaf, pieces.mean)?;
            let y_leaf = tape.constant(y.clone())?;
            let inc = tape.gaussian_logpdf(y_leaf, hm, pieces.innov_cov)?;
            let new_loglik = tape.add(loglik, inc)?;
            let record = history.is_some().then(|| StepRecord {
                forecast: tape.value(forecast.particles).clone(),
                analysis: tape.value(pieces.analysis).clone(),
                innovation: tape.value(pieces.innovation).clone(),
                innov_cov: tape.value(pieces.innov_cov).clone(),
            });
            let diag = StepDiag {
                t,
                mean_norm: tape.value(pieces.mean).iter().map(|v| v * v).sum::<f64>().sqrt(),
                cov_trace: pieces.cov_trace,
                increment: tape.value(inc)[(0, 0)],
                ess: None,
            };
            Ok((
                Ensemble {
                    particles: pieces.analysis,
                    t,
                },
                new_loglik,
                record,
                diag,
            ))
        })()
        .map_err(|e| e.at_step(t))?;
        ensemble = step.0;
        loglik = step.1;
        if let (Some(h), Some(rec)) = (history.as_mut(), step.2) {
            h.push(rec);
        }
        diagnostics.push(step.3);
    }

    Ok(FilterRun {
        ensemble,
        loglik,
        initial: init_values,
        history,
        diagnostics,
    })
}

/// Value and parameter gradient of the filter log-likelihood in one pass.
pub fn loglik_and_grad(
    model: &StateSpaceModel,
    theta: &crate::models::ThetaParams,
    obs: &[Value],
    config: &EnkfConfig,
    noise: &mut dyn NoiseSource,
) -> Result<(f64, crate::models::ThetaParams)> {
    let mut tape = Tape::new();
    let nodes = crate::models::register_theta(&mut tape, theta)?;
    let run = run_filter(&mut tape, model, &nodes, obs, InitialEnsemble::Sample, config, noise)?;
    let value = tape.value(run.loglik)[(0, 0)];
    let grads = tape.backward(run.loglik)?;
    let grad = crate::models::extract_gradient(&tape, &grads, &nodes, theta);
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::problems::{linear_model, linear_true_params};
    use crate::models::{register_theta, NoiseSpec, ThetaParams, TransitionSpec};
    use crate::rng::substream;
    use ndarray::arr2;

    fn identity_fixed_model(d: usize, s_scale: f64) -> StateSpaceModel {
        StateSpaceModel {
            d_x: d,
            d_y: d,
            transition: TransitionSpec::LinearBanded,
            noise: NoiseSpec::Fixed(Array2::eye(d) * s_scale),
            h: Array2::eye(d),
            r: Array2::eye(d),
            init_mean: Array2::zeros((d, 1)),
            init_cov: Array2::eye(d),
        }
    }

    #[test]
    fn gaspari_cohn_branch_values() {
        assert_eq!(gc_phi(0.0), 1.0);
        assert!((gc_phi(1.0) - 5.0 / 24.0).abs() < 1e-15);
        assert_eq!(gc_phi(2.0), 0.0);
        assert_eq!(gc_phi(3.5), 0.0);
        // continuity across the branch point and range [0, 1]
        for i in 0..=200 {
            let z = i as f64 / 100.0;
            let v = gc_phi(z);
            assert!((-1e-12..=1.0).contains(&v), "phi({z}) = {v}");
        }
        assert!((gc_phi(1.0 - 1e-9) - gc_phi(1.0 + 1e-9)).abs() < 1e-7);
    }

    #[test]
    fn gaspari_cohn_support_and_symmetry() {
        let d = 80;
        let rho = gaspari_cohn(d, 5.0, false);
        for i in 0..d {
            assert_eq!(rho[(i, i)], 1.0);
            for j in 0..d {
                assert!((rho[(i, j)] - rho[(j, i)]).abs() < 1e-15);
                if (i as f64 - j as f64).abs() >= 10.0 {
                    assert_eq!(rho[(i, j)], 0.0);
                }
            }
        }
        // interior rows have 4r - 1 nonzeros (2r - 1 on each side plus the diagonal)
        let nonzeros = (0..d).filter(|&j| rho[(40, j)] > 0.0).count();
        assert_eq!(nonzeros, 19);
    }

    #[test]
    fn moments_two_point_example() {
        let mut tape = Tape::new();
        let x = tape.constant(arr2(&[[0.0, 2.0], [0.0, 0.0]])).unwrap();
        let (mean, cov) = empirical_moments(&mut tape, x).unwrap();
        assert_eq!(tape.value(mean), &arr2(&[[1.0], [0.0]]));
        assert_eq!(tape.value(cov), &arr2(&[[2.0, 0.0], [0.0, 0.0]]));
    }

    #[test]
    fn moments_collapse_when_columns_equal() {
        let mut tape = Tape::new();
        let x = tape.constant(Array2::from_elem((3, 4), 2.5)).unwrap();
        let (mean, cov) = empirical_moments(&mut tape, x).unwrap();
        for v in tape.value(mean).iter() {
            assert!((v - 2.5).abs() < 1e-15);
        }
        for v in tape.value(cov).iter() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn forecast_identity_map_no_noise() {
        // S = 0, F = identity: forecast equals input
        let model = identity_fixed_model(3, 0.0);
        let theta = ThetaParams { alpha: vec![1.0, 0.0, 0.0], beta: vec![] };
        let mut tape = Tape::new();
        let nodes = register_theta(&mut tape, &theta).unwrap();
        let noise_ctx = prepare_noise(&mut tape, &model, &nodes).unwrap();
        let trans_ctx = prepare_transition(&mut tape, &model, &nodes).unwrap();
        let x0 = arr2(&[[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]]);
        let particles = tape.constant(x0.clone()).unwrap();
        let mut rng = substream(1, "t", &[]);
        let out = forecast_step(
            &mut tape,
            &trans_ctx,
            &noise_ctx,
            Ensemble { particles, t: 0 },
            &mut rng,
        )
        .unwrap();
        assert_eq!(tape.value(out.particles), &x0);
        assert_eq!(out.t, 1);
    }

    #[test]
    fn forecast_zero_map_gives_raw_draws() {
        // F = 0, S = I: forecast columns are the standard-normal draws
        let model = identity_fixed_model(3, 1.0);
        let theta = ThetaParams { alpha: vec![0.0, 0.0, 0.0], beta: vec![] };
        let mut tape = Tape::new();
        let nodes = register_theta(&mut tape, &theta).unwrap();
        let noise_ctx = prepare_noise(&mut tape, &model, &nodes).unwrap();
        let trans_ctx = prepare_transition(&mut tape, &model, &nodes).unwrap();
        let particles = tape.constant(Array2::zeros((3, 4))).unwrap();
        let mut probe = substream(7, "draws", &[]);
        let expected = probe.standard_normal(3, 4);
        let mut rng = substream(7, "draws", &[]);
        let out = forecast_step(
            &mut tape,
            &trans_ctx,
            &noise_ctx,
            Ensemble { particles, t: 0 },
            &mut rng,
        )
        .unwrap();
        assert_eq!(tape.value(out.particles), &expected);
    }

    #[test]
    fn zero_covariance_means_no_update() {
        // all particles equal: Chat = 0, K = 0, analysis = forecast
        let model = identity_fixed_model(2, 0.0);
        let theta = ThetaParams { alpha: vec![1.0, 0.0, 0.0], beta: vec![] };
        let mut tape = Tape::new();
        let nodes = register_theta(&mut tape, &theta).unwrap();
        let init = Array2::from_elem((2, 3), 1.5);
        let mut rng = substream(3, "t", &[]);
        let run = run_filter(
            &mut tape,
            &model,
            &nodes,
            &[arr2(&[[0.3], [0.1]])],
            InitialEnsemble::Given(&init),
            &EnkfConfig { ensemble_size: 3, ..Default::default() },
            &mut rng,
        )
        .unwrap();
        assert_eq!(tape.value(run.ensemble.particles), &init);
    }

    #[test]
    fn scalar_loglik_increment_value() {
        // d=1: forecast mean 0, Ctilde = 1, H = 1, R = 1, y = 0:
        // increment = -0.5 ln(4 pi). Two particles at +-1 give mean 0, C = 1.
        let model = StateSpaceModel {
            d_x: 1,
            d_y: 1,
            transition: TransitionSpec::LinearBanded,
            noise: NoiseSpec::Fixed(Array2::zeros((1, 1))),
            h: Array2::eye(1),
            r: Array2::eye(1),
            init_mean: Array2::zeros((1, 1)),
            init_cov: Array2::eye(1),
        };
        // identity needs d_x >= 2 in the banded map; use alpha = (1,0,0) on 1x1:
        // shift terms vanish, so it degenerates to multiplication by alpha_1...
        // banded transition requires d >= 2, so run d = 2 with the second
        // coordinate unobserved instead.
        let model = StateSpaceModel {
            d_x: 2,
            d_y: 1,
            h: arr2(&[[1.0, 0.0]]),
            r: Array2::eye(1),
            ..model
        };
        let model = StateSpaceModel {
            noise: NoiseSpec::Fixed(Array2::zeros((2, 2))),
            init_mean: Array2::zeros((2, 1)),
            init_cov: Array2::eye(2),
            ..model
        };
        let theta = ThetaParams { alpha: vec![1.0, 0.0, 0.0], beta: vec![] };
        let mut tape = Tape::new();
        let nodes = register_theta(&mut tape, &theta).unwrap();
        // +-1/sqrt(2) gives sample mean 0 and variance 1 with the N-1 divisor
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let init = arr2(&[[a, -a], [0.0, 0.0]]);
        let mut rng = substream(5, "t", &[]);
        let run = run_filter(
            &mut tape,
            &model,
            &nodes,
            &[arr2(&[[0.0]])],
            InitialEnsemble::Given(&init),
            &EnkfConfig { ensemble_size: 2, ..Default::default() },
            &mut rng,
        )
        .unwrap();
        let expect = -0.5 * (4.0 * std::f64::consts::PI).ln();
        assert!((tape.value(run.loglik)[(0, 0)] - expect).abs() < 1e-12);
        assert_eq!(run.diagnostics.len(), 1);
        assert!((run.diagnostics[0].increment - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_observation_sequence() {
        let model = linear_model(4);
        let theta = linear_true_params();
        let mut tape = Tape::new();
        let nodes = register_theta(&mut tape, &theta).unwrap();
        let mut rng = substream(8, "t", &[]);
        let run = run_filter(
            &mut tape,
            &model,
            &nodes,
            &[],
            InitialEnsemble::Sample,
            &EnkfConfig { ensemble_size: 5, ..Default::default() },
            &mut rng,
        )
        .unwrap();
        assert_eq!(tape.value(run.loglik)[(0, 0)], 0.0);
        assert_eq!(tape.value(run.ensemble.particles), &run.initial);
        assert_eq!(run.ensemble.t, 0);
    }

    #[test]
    fn same_seed_bit_identical() {
        let model = linear_model(6);
        let theta = linear_true_params();
        let mut gen = substream(21, "data", &[]);
        let traj =
            crate::models::problems::simulate(&model, &theta, 4, &mut gen).unwrap();
        let cfg = EnkfConfig { ensemble_size: 7, ..Default::default() };
        let run = |seed: u64| -> f64 {
            let mut rng = substream(seed, "filter", &[]);
            let (ll, _) = loglik_and_grad(&model, &theta, &traj.obs, &cfg, &mut rng).unwrap();
            ll
        };
        let a = run(100);
        let b = run(100);
        let c = run(101);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn exchangeability_under_column_permutation() {
        // Permuting particle columns together with the matched draws permutes
        // the output columns. The blocked matmul kernels contract over the
        // particle axis in panel order, so equality is pinned at 1e-11
        // relative rather than bitwise.
        let model = linear_model(4);
        let theta = linear_true_params();
        let mut gen = substream(22, "data", &[]);
        let traj = crate::models::problems::simulate(&model, &theta, 3, &mut gen).unwrap();
        let cfg = EnkfConfig { ensemble_size: 2, ..Default::default() };

        let mut rng = substream(33, "filter", &[]);
        let mut rec = crate::rng::RecordingSource::new(&mut rng);
        let mut tape = Tape::new();
        let nodes = register_theta(&mut tape, &theta).unwrap();
        let run = run_filter(&mut tape, &model, &nodes, &traj.obs, InitialEnsemble::Sample, &cfg, &mut rec)
            .unwrap();
        let ll = tape.value(run.loglik)[(0, 0)];
        let out = tape.value(run.ensemble.particles).clone();
        let init = run.initial.clone();

        // permute columns of the initial ensemble and of every matched draw
        let perm = |v: &Value| -> Value {
            let mut p = v.clone();
            let n = v.ncols();
            for j in 0..n {
                p.column_mut(j).assign(&v.column(n - 1 - j));
            }
            p
        };
        // the first recorded draw produced the initial ensemble, which the
        // replay run receives explicitly
        let draws: Vec<Value> = rec.log.iter().skip(1).map(&perm).collect();
        let mut replay = crate::rng::ReplaySource::new(draws, rec.uniforms.clone());
        let permuted_init = perm(&init);
        let mut tape2 = Tape::new();
        let nodes2 = register_theta(&mut tape2, &theta).unwrap();
        let run2 = run_filter(
            &mut tape2,
            &model,
            &nodes2,
            &traj.obs,
            InitialEnsemble::Given(&permuted_init),
            &cfg,
            &mut replay,
        )
        .unwrap();
        let ll2 = tape2.value(run2.loglik)[(0, 0)];
        assert!((ll - ll2).abs() <= 1e-11 * (1.0 + ll.abs()));
        let out2 = tape2.value(run2.ensemble.particles);
        for j in 0..2 {
            for i in 0..4 {
                let (a, b) = (out[(i, j)], out2[(i, 1 - j)]);
                assert!((a - b).abs() <= 1e-11 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn all_ones_taper_matches_dense_untapered_bitwise() {
        let model = linear_model(5);
        let theta = linear_true_params();
        let mut gen = substream(44, "data", &[]);
        let traj = crate::models::problems::simulate(&model, &theta, 4, &mut gen).unwrap();
        // radius so large that every phi value rounds to exactly 1.0
        let cfg_taper = EnkfConfig {
            ensemble_size: 6,
            taper_radius: Some(1e12),
            ..Default::default()
        };
        let cfg_dense = EnkfConfig {
            ensemble_size: 6,
            dense_covariance: true,
            ..Default::default()
        };
        let rho = gaspari_cohn(5, 1e12, false);
        assert!(rho.iter().all(|&v| v == 1.0));
        let run = |cfg: &EnkfConfig| -> (f64, Value) {
            let mut rng = substream(9, "filter", &[]);
            let mut tape = Tape::new();
            let nodes = register_theta(&mut tape, &theta).unwrap();
            let run =
                run_filter(&mut tape, &model, &nodes, &traj.obs, InitialEnsemble::Sample, cfg, &mut rng)
                    .unwrap();
            (
                tape.value(run.loglik)[(0, 0)],
                tape.value(run.ensemble.particles).clone(),
            )
        };
        let (ll_t, out_t) = run(&cfg_taper);
        let (ll_d, out_d) = run(&cfg_dense);
        assert_eq!(ll_t.to_bits(), ll_d.to_bits());
        for (a, b) in out_t.iter().zip(out_d.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // and the factored untapered path agrees to floating-point slack
        let cfg_plain = EnkfConfig { ensemble_size: 6, ..Default::default() };
        let (ll_p, _) = run(&cfg_plain);
        assert!((ll_p - ll_d).abs() < 1e-9 * (1.0 + ll_d.abs()));
    }
}
