//! Learning-problem builders: the banded linear-Gaussian benchmark and the
//! three circulant-dynamics problems (parameterized polynomial dynamics,
//! fully-unknown NN surrogate, NN correction of an inaccurate model), plus
//! reference-model data simulation.

use ndarray::Array2;

use super::fields::poly18_reference_coeffs;
use super::nn::NnArch;
use super::{
    apply_transition_plain, NoiseSpec, OdeFlow, StateSpaceModel, ThetaParams, TransitionSpec,
    VectorFieldSpec,
};
use crate::ad::linalg::cholesky_psd;
use crate::error::Result;
use crate::rng::{substream, NoiseSource};

/// Identity observation operator.
pub fn h_full(d_x: usize) -> Array2<f64> {
    Array2::eye(d_x)
}

/// Observe two out of every three coordinates (rows e_1, e_2, e_4, e_5, ...);
/// d_y = d_x - floor(d_x / 3).
pub fn h_two_of_three(d_x: usize) -> Array2<f64> {
    let rows: Vec<usize> = (0..d_x).filter(|i| i % 3 != 2).collect();
    let mut h = Array2::zeros((rows.len(), d_x));
    for (r, &i) in rows.iter().enumerate() {
        h[(r, i)] = 1.0;
    }
    h
}

/// True parameters of the banded linear benchmark.
pub fn linear_true_params() -> ThetaParams {
    ThetaParams {
        alpha: vec![0.3, 0.6, 0.1],
        beta: NoiseSpec::exp_kernel_internal(0.5, 1.0),
    }
}

/// Training initialization of the banded linear benchmark.
pub fn linear_init_params() -> ThetaParams {
    ThetaParams {
        alpha: vec![0.5, 0.5, 0.5],
        beta: NoiseSpec::exp_kernel_internal(1.0, 0.1),
    }
}

/// Banded linear-Gaussian model: tridiagonal dynamics, exponential-kernel
/// process noise, identity observations with variance 0.5, x0 ~ N(0, 4 I).
pub fn linear_model(d_x: usize) -> StateSpaceModel {
    StateSpaceModel {
        d_x,
        d_y: d_x,
        transition: TransitionSpec::LinearBanded,
        noise: NoiseSpec::ExpKernel,
        h: h_full(d_x),
        r: Array2::eye(d_x) * 0.5,
        init_mean: Array2::zeros((d_x, 1)),
        init_cov: Array2::eye(d_x) * 4.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Parameterized,
    FullyUnknown,
    Correction,
}

#[derive(Debug, Clone)]
pub struct LorenzConfig {
    pub d_x: usize,
    pub partial_obs: bool,
    pub r_scale: f64,
    pub init_cov_scale: f64,
    pub dt_int: f64,
    pub steps: usize,
    /// effective initial diagonal of Q (the internal beta is derived)
    pub q0_diag: f64,
    /// seed for NN initialization and the frozen perturbed coefficients
    pub seed: u64,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self {
            d_x: 40,
            partial_obs: false,
            r_scale: 1.0,
            init_cov_scale: 50.0,
            dt_int: 0.01,
            steps: 5,
            q0_diag: 2.0,
            seed: 0,
        }
    }
}

/// Reference circulant model (known dynamics, no process noise), used to
/// generate data and as the evaluation baseline.
pub fn lorenz_reference_model(cfg: &LorenzConfig) -> StateSpaceModel {
    let h = if cfg.partial_obs {
        h_two_of_three(cfg.d_x)
    } else {
        h_full(cfg.d_x)
    };
    let d_y = h.nrows();
    StateSpaceModel {
        d_x: cfg.d_x,
        d_y,
        transition: TransitionSpec::Ode(OdeFlow {
            field: VectorFieldSpec::Lorenz96,
            dt_int: cfg.dt_int,
            steps: cfg.steps,
        }),
        noise: NoiseSpec::Fixed(Array2::zeros((cfg.d_x, cfg.d_x))),
        h,
        r: Array2::eye(d_y) * cfg.r_scale,
        init_mean: Array2::zeros((cfg.d_x, 1)),
        init_cov: Array2::eye(cfg.d_x) * cfg.init_cov_scale,
    }
}

/// Build one of the three learning problems with its initialization.
pub fn build_problem(kind: ProblemKind, cfg: &LorenzConfig) -> Result<(StateSpaceModel, ThetaParams)> {
    let mut reference = lorenz_reference_model(cfg);
    let beta0 = vec![NoiseSpec::diag_internal_from_q(cfg.q0_diag); cfg.d_x];
    let (field, alpha0) = match kind {
        ProblemKind::Parameterized => (VectorFieldSpec::Poly18, vec![0.0; 18]),
        ProblemKind::FullyUnknown => {
            let arch = NnArch::default();
            let mut rng = substream(cfg.seed, "nn-init", &[]);
            let alpha0 = arch.init_weights(&mut rng);
            (VectorFieldSpec::Nn(arch), alpha0)
        }
        ProblemKind::Correction => {
            let arch = NnArch::default();
            let mut rng = substream(cfg.seed, "f-approx", &[]);
            let star = poly18_reference_coeffs();
            // variance 1 on the bias, 0.1 on the linear terms, 0.01 on the
            // quadratics; the draw is frozen with the experiment seed
            let approx: Vec<f64> = star
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let std = if i == 0 {
                        1.0
                    } else if i <= 5 {
                        0.1f64.sqrt()
                    } else {
                        0.01f64.sqrt()
                    };
                    a + std * rng.standard_normal(1, 1)[(0, 0)]
                })
                .collect();
            let mut rng = substream(cfg.seed, "nn-init", &[]);
            let alpha0 = arch.init_weights(&mut rng);
            (
                VectorFieldSpec::Corrected {
                    approx_coeffs: approx,
                    nn: arch,
                },
                alpha0,
            )
        }
    };
    reference.transition = TransitionSpec::Ode(OdeFlow {
        field,
        dt_int: cfg.dt_int,
        steps: cfg.steps,
    });
    reference.noise = NoiseSpec::DiagSoftplus;
    let theta0 = ThetaParams {
        alpha: alpha0,
        beta: beta0,
    };
    reference.check_theta(&theta0)?;
    Ok((reference, theta0))
}

/// One simulated trajectory: states x_0..x_T and observations y_1..y_T.
pub struct Trajectory {
    pub states: Vec<Array2<f64>>,
    pub obs: Vec<Array2<f64>>,
}

/// Simulate the model forward with the given parameters. Draw order per
/// trajectory: initial state, then (state noise, observation noise) per step.
pub fn simulate(
    model: &StateSpaceModel,
    theta: &ThetaParams,
    t_len: usize,
    noise: &mut dyn NoiseSource,
) -> Result<Trajectory> {
    model.validate()?;
    model.check_theta(theta)?;
    let init_sqrt = cholesky_psd(&model.init_cov, "simulate")?;
    let s_mat = model.noise.s_matrix(&theta.beta, model.d_x)?;
    let r_sqrt = cholesky_psd(&model.r, "simulate")?;

    let mut x = &model.init_mean + &init_sqrt.dot(&noise.standard_normal(model.d_x, 1));
    let mut states = vec![x.clone()];
    let mut obs = Vec::with_capacity(t_len);
    for step in 0..t_len {
        let fx = apply_transition_plain(&model.transition, &theta.alpha, &x)
            .map_err(|e| e.at_step(step + 1))?;
        x = &fx + &s_mat.dot(&noise.standard_normal(model.d_x, 1));
        let y = &model.h.dot(&x) + &r_sqrt.dot(&noise.standard_normal(model.d_y, 1));
        states.push(x.clone());
        obs.push(y);
    }
    Ok(Trajectory { states, obs })
}

/// Burn in from a random start and subsample a long run of the reference
/// flow, giving points that lie on the attractor.
pub fn attractor_points(
    model: &StateSpaceModel,
    theta: &ThetaParams,
    burn: usize,
    stride: usize,
    count: usize,
    noise: &mut dyn NoiseSource,
) -> Result<Vec<Array2<f64>>> {
    let mut x = noise.standard_normal(model.d_x, 1);
    for step in 0..burn {
        x = apply_transition_plain(&model.transition, &theta.alpha, &x)
            .map_err(|e| e.at_step(step))?;
    }
    let mut pts = Vec::with_capacity(count);
    for p in 0..count {
        for _ in 0..stride {
            x = apply_transition_plain(&model.transition, &theta.alpha, &x)
                .map_err(|e| e.at_step(burn + p * stride))?;
        }
        pts.push(x.clone());
    }
    Ok(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::fields::{lorenz96_field_plain, poly18_field_plain};

    #[test]
    fn two_of_three_pattern_dimensions() {
        for d in [10usize, 20, 40, 80] {
            let h = h_two_of_three(d);
            assert_eq!(h.nrows(), d - d / 3);
            // each row is a distinct standard basis vector
            for row in h.rows() {
                assert_eq!(row.sum(), 1.0);
            }
        }
        let h = h_two_of_three(7);
        assert_eq!(h[(0, 0)], 1.0);
        assert_eq!(h[(1, 1)], 1.0);
        assert_eq!(h[(2, 3)], 1.0);
        assert_eq!(h[(3, 4)], 1.0);
        assert_eq!(h[(4, 6)], 1.0);
    }

    #[test]
    fn parameterized_problem_initialization() {
        let cfg = LorenzConfig { d_x: 10, ..Default::default() };
        let (model, theta) = build_problem(ProblemKind::Parameterized, &cfg).unwrap();
        assert_eq!(theta.alpha, vec![0.0; 18]);
        // effective initial Q is q0_diag on the diagonal
        let q = model.noise.q_matrix(&theta.beta, 10);
        for i in 0..10 {
            assert!((q[(i, i)] - 2.0).abs() < 1e-10);
        }
        assert_eq!(model.d_y, 10);
    }

    #[test]
    fn fully_unknown_problem_dimension() {
        let cfg = LorenzConfig { d_x: 40, ..Default::default() };
        let (model, theta) = build_problem(ProblemKind::FullyUnknown, &cfg).unwrap();
        let arch = NnArch::default();
        assert_eq!(theta.alpha.len(), arch.param_count());
        assert_eq!(theta.len(), arch.param_count() + 40);
        assert_eq!(model.layout().total(), theta.len());
    }

    #[test]
    fn correction_with_zero_perturbation_is_reference() {
        // hand-build the corrected field with exact coefficients and zero NN
        let arch = NnArch::default();
        let field = VectorFieldSpec::Corrected {
            approx_coeffs: poly18_reference_coeffs().to_vec(),
            nn: arch.clone(),
        };
        let alpha = vec![0.0; arch.param_count()];
        let x = Array2::from_shape_fn((10, 2), |(i, j)| ((i + j) as f64 * 0.17).sin() * 3.0);
        let corrected = super::super::fields::field_eval_plain(&field, &alpha, &x).unwrap();
        let reference = lorenz96_field_plain(&x).unwrap();
        for (a, b) in corrected.iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn correction_perturbation_is_frozen_by_seed() {
        let cfg = LorenzConfig { d_x: 10, seed: 3, ..Default::default() };
        let (m1, _) = build_problem(ProblemKind::Correction, &cfg).unwrap();
        let (m2, _) = build_problem(ProblemKind::Correction, &cfg).unwrap();
        let get = |m: &StateSpaceModel| match &m.transition {
            TransitionSpec::Ode(f) => match &f.field {
                VectorFieldSpec::Corrected { approx_coeffs, .. } => approx_coeffs.clone(),
                _ => panic!("wrong field"),
            },
            _ => panic!("wrong transition"),
        };
        assert_eq!(get(&m1), get(&m2));
        // perturbation scale decreases with coefficient order
        let star = poly18_reference_coeffs();
        let tilde = get(&m1);
        assert!((tilde[0] - star[0]).abs() < 4.0);
        for i in 6..18 {
            assert!((tilde[i] - star[i]).abs() < 0.5);
        }
    }

    #[test]
    fn simulate_is_deterministic_given_seed() {
        let model = linear_model(6);
        let theta = linear_true_params();
        let mut rng1 = substream(42, "gen", &[0]);
        let mut rng2 = substream(42, "gen", &[0]);
        let t1 = simulate(&model, &theta, 5, &mut rng1).unwrap();
        let t2 = simulate(&model, &theta, 5, &mut rng2).unwrap();
        for (a, b) in t1.states.iter().zip(t2.states.iter()) {
            assert_eq!(a, b);
        }
        for (a, b) in t1.obs.iter().zip(t2.obs.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(t1.states.len(), 6);
        assert_eq!(t1.obs.len(), 5);
    }

    #[test]
    fn reference_poly_coeffs_match_reference_on_attractor() {
        let cfg = LorenzConfig { d_x: 8, ..Default::default() };
        let model = lorenz_reference_model(&cfg);
        let theta = ThetaParams { alpha: vec![], beta: vec![] };
        let mut rng = substream(9, "attractor", &[]);
        let pts = attractor_points(&model, &theta, 200, 5, 20, &mut rng).unwrap();
        let coeffs = poly18_reference_coeffs();
        for p in &pts {
            let a = poly18_field_plain(&coeffs, p).unwrap();
            let b = lorenz96_field_plain(p).unwrap();
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() < 1e-11);
            }
        }
    }
}
