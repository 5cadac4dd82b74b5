//! The model zoo: parameter vectors, transition maps (banded linear and
//! ODE flows), process-noise parameterizations with differentiable square
//! roots, observation pairs, and the learning-problem builders.

pub mod fields;
pub mod nn;
pub mod problems;

use ndarray::Array2;

use crate::ad::{NodeId, Tape, Value};
use crate::error::{Error, Result};

/// Learnable parameters: dynamics block `alpha` and noise block `beta`.
/// Noise blocks are stored in their unconstrained internal coordinates (see
/// [`NoiseSpec`]); reporting helpers map back to effective values.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ThetaParams {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.alpha.clone();
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn unflatten(layout: &ParamLayout, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.total() {
            return Err(Error::Domain(format!(
                "flat parameter vector has length {}, layout expects {}",
                flat.len(),
                layout.total()
            )));
        }
        let (a, b) = flat.split_at(layout.alpha_len);
        Ok(Self {
            alpha: a.to_vec(),
            beta: b.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.alpha.len() + self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Euclidean distance between the alpha blocks.
    pub fn alpha_dist(&self, other: &[f64]) -> f64 {
        self.alpha
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Named-block layout mapping the flat vector to (alpha, beta).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub alpha_blocks: Vec<(String, usize)>,
    pub beta_block: (String, usize),
    pub alpha_len: usize,
}

impl ParamLayout {
    pub fn new(alpha_blocks: Vec<(String, usize)>, beta_block: (String, usize)) -> Self {
        let alpha_len = alpha_blocks.iter().map(|(_, l)| l).sum();
        Self {
            alpha_blocks,
            beta_block,
            alpha_len,
        }
    }

    pub fn total(&self) -> usize {
        self.alpha_len + self.beta_block.1
    }
}

/// ODE-flow transition: `steps` RK4 steps of size `dt_int` between
/// observations, so the observation spacing is exactly `steps * dt_int`.
#[derive(Debug, Clone)]
pub struct OdeFlow {
    pub field: VectorFieldSpec,
    pub dt_int: f64,
    pub steps: usize,
}

impl OdeFlow {
    pub fn dt_obs(&self) -> f64 {
        self.steps as f64 * self.dt_int
    }
}

#[derive(Debug, Clone)]
pub enum VectorFieldSpec {
    Lorenz96,
    Poly18,
    Nn(nn::NnArch),
    /// frozen inaccurate polynomial coefficients plus a learned NN residual
    Corrected {
        approx_coeffs: Vec<f64>,
        nn: nn::NnArch,
    },
}

impl VectorFieldSpec {
    pub fn alpha_len(&self) -> usize {
        match self {
            Self::Lorenz96 => 0,
            Self::Poly18 => 18,
            Self::Nn(arch) | Self::Corrected { nn: arch, .. } => arch.param_count(),
        }
    }

    pub fn alpha_blocks(&self) -> Vec<(String, usize)> {
        match self {
            Self::Lorenz96 => vec![],
            Self::Poly18 => vec![("poly".into(), 18)],
            Self::Nn(arch) | Self::Corrected { nn: arch, .. } => arch.alpha_blocks(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum TransitionSpec {
    /// tridiagonal map: alpha = (diagonal, super-, sub-diagonal entries)
    LinearBanded,
    Ode(OdeFlow),
}

impl TransitionSpec {
    pub fn alpha_len(&self) -> usize {
        match self {
            Self::LinearBanded => 3,
            Self::Ode(flow) => flow.field.alpha_len(),
        }
    }

    pub fn alpha_blocks(&self) -> Vec<(String, usize)> {
        match self {
            Self::LinearBanded => vec![("banded".into(), 3)],
            Self::Ode(flow) => flow.field.alpha_blocks(),
        }
    }
}

/// Process-noise parameterization mapping beta to a square root S with
/// Q = S S^T.
#[derive(Debug, Clone)]
pub enum NoiseSpec {
    /// [Q]_ij = b1 exp(-b2 |i-j|); beta stores (ln b1, ln b2) so plain
    /// gradient ascent cannot leave the admissible cone
    ExpKernel,
    /// S = diag(softplus(beta)), Q = diag(softplus(beta)^2)
    DiagSoftplus,
    /// constant square root (reference runs, tests); beta is empty
    Fixed(Array2<f64>),
}

impl NoiseSpec {
    pub fn beta_len(&self, d_x: usize) -> usize {
        match self {
            Self::ExpKernel => 2,
            Self::DiagSoftplus => d_x,
            Self::Fixed(_) => 0,
        }
    }

    /// Effective (b1, b2) of the exponential kernel from internal log values.
    pub fn exp_kernel_effective(beta: &[f64]) -> (f64, f64) {
        (beta[0].exp(), beta[1].exp())
    }

    pub fn exp_kernel_internal(b1: f64, b2: f64) -> Vec<f64> {
        vec![b1.ln(), b2.ln()]
    }

    /// Internal beta giving softplus(beta)^2 = q on the diagonal.
    pub fn diag_internal_from_q(q: f64) -> f64 {
        inv_softplus(q.max(1e-300).sqrt())
    }

    /// Plain (value-level) Q matrix.
    pub fn q_matrix(&self, beta: &[f64], d_x: usize) -> Array2<f64> {
        match self {
            Self::ExpKernel => {
                let (b1, b2) = Self::exp_kernel_effective(beta);
                let mut q = Array2::zeros((d_x, d_x));
                for i in 0..d_x {
                    for j in 0..d_x {
                        q[(i, j)] = b1 * (-b2 * (i as f64 - j as f64).abs()).exp();
                    }
                }
                q
            }
            Self::DiagSoftplus => {
                let mut q = Array2::zeros((d_x, d_x));
                for i in 0..d_x {
                    let s = crate::ad::ops::softplus_scalar(beta[i]);
                    q[(i, i)] = s * s;
                }
                q
            }
            Self::Fixed(s) => s.dot(&s.t()),
        }
    }

    /// Plain square root S (lower Cholesky for the kernel case).
    pub fn s_matrix(&self, beta: &[f64], d_x: usize) -> Result<Array2<f64>> {
        match self {
            Self::ExpKernel => {
                crate::ad::linalg::cholesky_psd(&self.q_matrix(beta, d_x), "exp_kernel_sqrt")
            }
            Self::DiagSoftplus => {
                let mut s = Array2::zeros((d_x, d_x));
                for i in 0..d_x {
                    s[(i, i)] = crate::ad::ops::softplus_scalar(beta[i]);
                }
                Ok(s)
            }
            Self::Fixed(s) => Ok(s.clone()),
        }
    }
}

pub fn inv_softplus(y: f64) -> f64 {
    // inverse of ln(1 + e^x); for large y the identity is exact to f64
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// State-space model: transition map, process noise, observation pair, and
/// Gaussian initial distribution. H and R are known constants.
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    pub d_x: usize,
    pub d_y: usize,
    pub transition: TransitionSpec,
    pub noise: NoiseSpec,
    pub h: Array2<f64>,
    pub r: Array2<f64>,
    pub init_mean: Array2<f64>,
    pub init_cov: Array2<f64>,
}

impl StateSpaceModel {
    pub fn validate(&self) -> Result<()> {
        if self.h.dim() != (self.d_y, self.d_x) {
            return Err(Error::Domain(format!(
                "H is {:?}, expected ({}, {})",
                self.h.dim(),
                self.d_y,
                self.d_x
            )));
        }
        if self.r.dim() != (self.d_y, self.d_y) {
            return Err(Error::Domain(format!("R is {:?}", self.r.dim())));
        }
        if self.init_mean.dim() != (self.d_x, 1) || self.init_cov.dim() != (self.d_x, self.d_x) {
            return Err(Error::Domain("initial moments have wrong shape".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(
            self.transition.alpha_blocks(),
            ("noise".into(), self.noise.beta_len(self.d_x)),
        )
    }

    pub fn check_theta(&self, theta: &ThetaParams) -> Result<()> {
        let want_a = self.transition.alpha_len();
        let want_b = self.noise.beta_len(self.d_x);
        if theta.alpha.len() != want_a || theta.beta.len() != want_b {
            return Err(Error::Domain(format!(
                "theta has ({}, {}) entries, model expects ({}, {})",
                theta.alpha.len(),
                theta.beta.len(),
                want_a,
                want_b
            )));
        }
        Ok(())
    }
}

/// Parameter leaves registered on one tape.
#[derive(Debug, Clone, Copy)]
pub struct ThetaNodes {
    pub alpha: Option<NodeId>,
    pub beta: Option<NodeId>,
}

pub fn register_theta(tape: &mut Tape, theta: &ThetaParams) -> Result<ThetaNodes> {
    let alpha = if theta.alpha.is_empty() {
        None
    } else {
        Some(tape.leaf(col_from(&theta.alpha))?)
    };
    let beta = if theta.beta.is_empty() {
        None
    } else {
        Some(tape.leaf(col_from(&theta.beta))?)
    };
    Ok(ThetaNodes { alpha, beta })
}

/// Extract the flat gradient (alpha then beta) from a backward pass.
pub fn extract_gradient(
    tape: &Tape,
    grads: &crate::ad::Gradients,
    nodes: &ThetaNodes,
    theta: &ThetaParams,
) -> ThetaParams {
    let pull = |id: Option<NodeId>, len: usize| -> Vec<f64> {
        match id {
            Some(id) => grads
                .wrt_or_zero(tape, id)
                .iter()
                .copied()
                .collect(),
            None => vec![0.0; len],
        }
    };
    ThetaParams {
        alpha: pull(nodes.alpha, theta.alpha.len()),
        beta: pull(nodes.beta, theta.beta.len()),
    }
}

pub fn col_from(xs: &[f64]) -> Value {
    Value::from_shape_vec((xs.len(), 1), xs.to_vec()).expect("column layout")
}

/// Differentiable noise nodes prepared once per run: the square root S and
/// the covariance Q = S S^T.
pub struct NoiseCtx {
    pub s: NodeId,
    pub q: NodeId,
}

pub fn prepare_noise(tape: &mut Tape, model: &StateSpaceModel, theta: &ThetaNodes) -> Result<NoiseCtx> {
    match &model.noise {
        NoiseSpec::ExpKernel => {
            let beta = theta
                .beta
                .ok_or_else(|| Error::Domain("exp kernel noise needs beta".into()))?;
            let lb1 = tape.slice_rows(beta, 0, 1)?;
            let lb2 = tape.slice_rows(beta, 1, 1)?;
            let b1 = tape.exp(lb1)?;
            let b2 = tape.exp(lb2)?;
            let d = model.d_x;
            let mut neg_dist = Value::zeros((d, d));
            for i in 0..d {
                for j in 0..d {
                    neg_dist[(i, j)] = -((i as f64 - j as f64).abs());
                }
            }
            let nd = tape.constant(neg_dist)?;
            let scaled = tape.smul(b2, nd)?;
            let kernel = tape.exp(scaled)?;
            let q = tape.smul(b1, kernel)?;
            let s = tape.cholesky(q)?;
            Ok(NoiseCtx { s, q })
        }
        NoiseSpec::DiagSoftplus => {
            let beta = theta
                .beta
                .ok_or_else(|| Error::Domain("diagonal noise needs beta".into()))?;
            let sp = tape.softplus(beta)?;
            let s = tape.diag_from_col(sp)?;
            let sq = tape.hadamard(sp, sp)?;
            let q = tape.diag_from_col(sq)?;
            Ok(NoiseCtx { s, q })
        }
        NoiseSpec::Fixed(s_mat) => {
            let s = tape.constant(s_mat.clone())?;
            let st = tape.transpose(s)?;
            let q = tape.matmul(s, st)?;
            Ok(NoiseCtx { s, q })
        }
    }
}

/// Differentiable transition prepared once per run (parameter slicing and NN
/// weight relayout happen here, not per evaluation).
pub enum TransitionCtx {
    Linear {
        a1: NodeId,
        a2: NodeId,
        a3: NodeId,
    },
    Ode {
        field: fields::FieldCtx,
        dt_int: f64,
        steps: usize,
    },
}

pub fn prepare_transition(
    tape: &mut Tape,
    model: &StateSpaceModel,
    theta: &ThetaNodes,
) -> Result<TransitionCtx> {
    match &model.transition {
        TransitionSpec::LinearBanded => {
            let alpha = theta
                .alpha
                .ok_or_else(|| Error::Domain("banded transition needs alpha".into()))?;
            Ok(TransitionCtx::Linear {
                a1: tape.slice_rows(alpha, 0, 1)?,
                a2: tape.slice_rows(alpha, 1, 1)?,
                a3: tape.slice_rows(alpha, 2, 1)?,
            })
        }
        TransitionSpec::Ode(flow) => {
            if flow.steps == 0 {
                return Err(Error::Domain("ODE flow needs steps >= 1".into()));
            }
            let field = fields::prepare_field(tape, &flow.field, theta, model.d_x)?;
            Ok(TransitionCtx::Ode {
                field,
                dt_int: flow.dt_int,
                steps: flow.steps,
            })
        }
    }
}

impl TransitionCtx {
    /// F_alpha applied column-wise to a d_x x N node.
    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Self::Linear { a1, a2, a3 } => {
                let up = tape.shift_rows(x, 1, false)?;
                let down = tape.shift_rows(x, -1, false)?;
                let t1 = tape.smul(*a1, x)?;
                let t2 = tape.smul(*a2, up)?;
                let t3 = tape.smul(*a3, down)?;
                let s = tape.add(t1, t2)?;
                tape.add(s, t3)
            }
            Self::Ode { field, dt_int, steps } => {
                fields::rk4_flow(tape, field, x, *dt_int, *steps)
            }
        }
    }
}

/// Plain (value-level) transition evaluation, used by data generation, the
/// EM residual update, and the forecast metrics.
pub fn apply_transition_plain(
    transition: &TransitionSpec,
    alpha: &[f64],
    x: &Array2<f64>,
) -> Result<Array2<f64>> {
    match transition {
        TransitionSpec::LinearBanded => {
            let (d, n) = x.dim();
            let mut out = Array2::zeros((d, n));
            for j in 0..n {
                for i in 0..d {
                    let mut v = alpha[0] * x[(i, j)];
                    if i + 1 < d {
                        v += alpha[1] * x[(i + 1, j)];
                    }
                    if i > 0 {
                        v += alpha[2] * x[(i - 1, j)];
                    }
                    out[(i, j)] = v;
                }
            }
            Ok(out)
        }
        TransitionSpec::Ode(flow) => fields::rk4_flow_plain(&flow.field, alpha, x, flow.dt_int, flow.steps),
    }
}

/// Dense A_alpha as a tape node (exact Kalman filter path).
pub fn linear_matrix_node(tape: &mut Tape, alpha: NodeId, d: usize) -> Result<NodeId> {
    let a1 = tape.slice_rows(alpha, 0, 1)?;
    let a2 = tape.slice_rows(alpha, 1, 1)?;
    let a3 = tape.slice_rows(alpha, 2, 1)?;
    let mut upper = Value::zeros((d, d));
    let mut lower = Value::zeros((d, d));
    for i in 0..d - 1 {
        upper[(i, i + 1)] = 1.0;
        lower[(i + 1, i)] = 1.0;
    }
    let eye = tape.constant(Value::eye(d))?;
    let up = tape.constant(upper)?;
    let lo = tape.constant(lower)?;
    let t1 = tape.smul(a1, eye)?;
    let t2 = tape.smul(a2, up)?;
    let t3 = tape.smul(a3, lo)?;
    let s = tape.add(t1, t2)?;
    tape.add(s, t3)
}
