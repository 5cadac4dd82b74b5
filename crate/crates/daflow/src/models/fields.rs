//! Vector fields on the circular spatial domain and the RK4 flow map, in
//! both tape-recorded (differentiable) and plain (value-only) forms.

use ndarray::Array2;

use super::nn::{self, NnCtx};
use super::{ThetaNodes, VectorFieldSpec};
use crate::ad::{NodeId, Tape, Value};
use crate::error::{Error, Result};

/// Maximum |state| before RK4 aborts: untrained surrogate fields can be
/// stiff enough to diverge.
pub const BLOWUP_LIMIT: f64 = 1e6;

/// Coefficients reproducing the reference circulant dynamics in the
/// 18-feature polynomial basis: bias 8, linear -1, and the two quadratic
/// interaction terms.
pub fn poly18_reference_coeffs() -> [f64; 18] {
    let mut a = [0.0; 18];
    a[0] = 8.0;
    a[3] = -1.0;
    a[11] = -1.0;
    a[16] = 1.0;
    a
}

/// Field evaluation context prepared once per tape (parameter slices and NN
/// weight relayout are hoisted out of the per-stage evaluations).
pub enum FieldCtx {
    Lorenz96,
    Poly18 { coeffs: Vec<NodeId> },
    Nn(NnCtx),
    Corrected { approx: Vec<NodeId>, nn: NnCtx },
}

pub fn prepare_field(
    tape: &mut Tape,
    spec: &VectorFieldSpec,
    theta: &ThetaNodes,
    d_x: usize,
) -> Result<FieldCtx> {
    match spec {
        VectorFieldSpec::Lorenz96 => {
            if d_x < 4 {
                return Err(Error::Domain(format!("circulant field needs d_x >= 4, got {d_x}")));
            }
            Ok(FieldCtx::Lorenz96)
        }
        VectorFieldSpec::Poly18 => {
            if d_x < 5 {
                return Err(Error::Domain(format!("polynomial field needs d_x >= 5, got {d_x}")));
            }
            let alpha = theta
                .alpha
                .ok_or_else(|| Error::Domain("polynomial field needs alpha".into()))?;
            let coeffs = (0..18)
                .map(|k| tape.slice_rows(alpha, k, 1))
                .collect::<Result<Vec<_>>>()?;
            Ok(FieldCtx::Poly18 { coeffs })
        }
        VectorFieldSpec::Nn(arch) => {
            let alpha = theta
                .alpha
                .ok_or_else(|| Error::Domain("NN field needs alpha".into()))?;
            Ok(FieldCtx::Nn(nn::prepare_nn(tape, arch, alpha)?))
        }
        VectorFieldSpec::Corrected { approx_coeffs, nn: arch } => {
            if d_x < 5 {
                return Err(Error::Domain(format!("polynomial field needs d_x >= 5, got {d_x}")));
            }
            let alpha = theta
                .alpha
                .ok_or_else(|| Error::Domain("corrected field needs alpha".into()))?;
            let approx = approx_coeffs
                .iter()
                .map(|&c| tape.const_scalar(c))
                .collect::<Result<Vec<_>>>()?;
            Ok(FieldCtx::Corrected {
                approx,
                nn: nn::prepare_nn(tape, arch, alpha)?,
            })
        }
    }
}

impl FieldCtx {
    pub fn eval(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Self::Lorenz96 => lorenz96_field(tape, x),
            Self::Poly18 { coeffs } => poly18_field(tape, coeffs, x),
            Self::Nn(ctx) => nn::nn_field(tape, ctx, x),
            Self::Corrected { approx, nn } => {
                let base = poly18_field(tape, approx, x)?;
                let resid = nn::nn_field(tape, nn, x)?;
                tape.add(base, resid)
            }
        }
    }
}

/// Circulant quadratic field: f_i = -x_{i-1} (x_{i-2} - x_{i+1}) - x_i + 8.
pub fn lorenz96_field(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let (d, n) = tape.value(x).dim();
    if d < 4 {
        return Err(Error::Domain(format!("circulant field needs d_x >= 4, got {d}")));
    }
    let sm1 = tape.shift_rows(x, -1, true)?;
    let sm2 = tape.shift_rows(x, -2, true)?;
    let sp1 = tape.shift_rows(x, 1, true)?;
    let diff = tape.sub(sm2, sp1)?;
    let prod = tape.hadamard(sm1, diff)?;
    let lin = tape.add(prod, x)?;
    let neg = tape.scale(lin, -1.0)?;
    let forcing = tape.constant(Value::from_elem((d, n), 8.0))?;
    tape.add(neg, forcing)
}

/// 18-feature polynomial field: per coordinate, bias, the five neighbors
/// i-2..i+2, their squares, and the seven pair products at offsets up to 2.
/// Feature order is fixed; `coeffs` are 1x1 nodes.
pub fn poly18_field(tape: &mut Tape, coeffs: &[NodeId], x: NodeId) -> Result<NodeId> {
    let (d, n) = tape.value(x).dim();
    if d < 5 {
        return Err(Error::Domain(format!("polynomial field needs d_x >= 5, got {d}")));
    }
    if coeffs.len() != 18 {
        return Err(Error::Domain(format!("expected 18 coefficients, got {}", coeffs.len())));
    }
    let sm2 = tape.shift_rows(x, -2, true)?;
    let sm1 = tape.shift_rows(x, -1, true)?;
    let sp1 = tape.shift_rows(x, 1, true)?;
    let sp2 = tape.shift_rows(x, 2, true)?;
    let neighbors = [sm2, sm1, x, sp1, sp2];

    let mut feats: Vec<NodeId> = Vec::with_capacity(18);
    feats.push(tape.constant(Value::from_elem((d, n), 1.0))?);
    feats.extend_from_slice(&neighbors);
    for v in neighbors {
        feats.push(tape.hadamard(v, v)?);
    }
    // pair products: consecutive offsets, then the offset-2 pairs
    for (a, b) in [(0, 1), (1, 2), (2, 3), (3, 4), (0, 2), (1, 3), (2, 4)] {
        feats.push(tape.hadamard(neighbors[a], neighbors[b])?);
    }

    let mut acc: Option<NodeId> = None;
    for (k, feat) in feats.into_iter().enumerate() {
        let term = tape.smul(coeffs[k], feat)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("18 features"))
}

/// Classical RK4 composition recorded on the tape.
pub fn rk4_flow(
    tape: &mut Tape,
    field: &FieldCtx,
    x0: NodeId,
    dt: f64,
    steps: usize,
) -> Result<NodeId> {
    if steps == 0 {
        return Err(Error::Domain("RK4 flow needs steps >= 1".into()));
    }
    let mut x = x0;
    for step in 0..steps {
        let k1 = field.eval(tape, x)?;
        let half_k1 = tape.scale(k1, dt / 2.0)?;
        let x2 = tape.add(x, half_k1)?;
        let k2 = field.eval(tape, x2)?;
        let half_k2 = tape.scale(k2, dt / 2.0)?;
        let x3 = tape.add(x, half_k2)?;
        let k3 = field.eval(tape, x3)?;
        let full_k3 = tape.scale(k3, dt)?;
        let x4 = tape.add(x, full_k3)?;
        let k4 = field.eval(tape, x4)?;

        let k2x2 = tape.scale(k2, 2.0)?;
        let k3x2 = tape.scale(k3, 2.0)?;
        let s = tape.add(k1, k2x2)?;
        let s = tape.add(s, k3x2)?;
        let s = tape.add(s, k4)?;
        let incr = tape.scale(s, dt / 6.0)?;
        x = tape.add(x, incr)?;
        let max_abs = tape.value(x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_abs > BLOWUP_LIMIT {
            return Err(Error::BlowUp { step });
        }
    }
    Ok(x)
}

// ---- plain (value-only) evaluation ----------------------------------------

pub fn lorenz96_field_plain(x: &Array2<f64>) -> Result<Array2<f64>> {
    let (d, n) = x.dim();
    if d < 4 {
        return Err(Error::Domain(format!("circulant field needs d_x >= 4, got {d}")));
    }
    let mut out = Array2::zeros((d, n));
    for j in 0..n {
        for i in 0..d {
            let im1 = x[((i + d - 1) % d, j)];
            let im2 = x[((i + d - 2) % d, j)];
            let ip1 = x[((i + 1) % d, j)];
            out[(i, j)] = -im1 * (im2 - ip1) - x[(i, j)] + 8.0;
        }
    }
    Ok(out)
}

pub fn poly18_field_plain(coeffs: &[f64], x: &Array2<f64>) -> Result<Array2<f64>> {
    let (d, n) = x.dim();
    if d < 5 {
        return Err(Error::Domain(format!("polynomial field needs d_x >= 5, got {d}")));
    }
    let mut out = Array2::zeros((d, n));
    for j in 0..n {
        for i in 0..d {
            let nb = [
                x[((i + d - 2) % d, j)],
                x[((i + d - 1) % d, j)],
                x[(i, j)],
                x[((i + 1) % d, j)],
                x[((i + 2) % d, j)],
            ];
            let mut feats = [0.0; 18];
            feats[0] = 1.0;
            feats[1..6].copy_from_slice(&nb);
            for (k, v) in nb.iter().enumerate() {
                feats[6 + k] = v * v;
            }
            for (k, (a, b)) in [(0, 1), (1, 2), (2, 3), (3, 4), (0, 2), (1, 3), (2, 4)]
                .into_iter()
                .enumerate()
            {
                feats[11 + k] = nb[a] * nb[b];
            }
            out[(i, j)] = feats.iter().zip(coeffs).map(|(f, c)| f * c).sum();
        }
    }
    Ok(out)
}

pub fn field_eval_plain(
    spec: &VectorFieldSpec,
    alpha: &[f64],
    x: &Array2<f64>,
) -> Result<Array2<f64>> {
    match spec {
        VectorFieldSpec::Lorenz96 => lorenz96_field_plain(x),
        VectorFieldSpec::Poly18 => poly18_field_plain(alpha, x),
        VectorFieldSpec::Nn(arch) => nn::nn_field_plain(arch, alpha, x),
        VectorFieldSpec::Corrected { approx_coeffs, nn: arch } => {
            let base = poly18_field_plain(approx_coeffs, x)?;
            let resid = nn::nn_field_plain(arch, alpha, x)?;
            Ok(base + resid)
        }
    }
}

pub fn rk4_flow_plain(
    spec: &VectorFieldSpec,
    alpha: &[f64],
    x0: &Array2<f64>,
    dt: f64,
    steps: usize,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::Domain("RK4 flow needs steps >= 1".into()));
    }
    let mut x = x0.clone();
    for step in 0..steps {
        let k1 = field_eval_plain(spec, alpha, &x)?;
        let k2 = field_eval_plain(spec, alpha, &(&x + &(&k1 * (dt / 2.0))))?;
        let k3 = field_eval_plain(spec, alpha, &(&x + &(&k2 * (dt / 2.0))))?;
        let k4 = field_eval_plain(spec, alpha, &(&x + &(&k3 * dt)))?;
        x = &x + &((&k1 + &(&k2 * 2.0) + &(&k3 * 2.0) + &k4) * (dt / 6.0));
        if x.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_LIMIT) {
            return Err(Error::BlowUp { step });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{register_theta, ThetaParams};
    use ndarray::arr2;

    fn eval_tape_field(spec: &VectorFieldSpec, alpha: &[f64], x: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let theta = ThetaParams { alpha: alpha.to_vec(), beta: vec![] };
        let nodes = register_theta(&mut tape, &theta).unwrap();
        let ctx = prepare_field(&mut tape, spec, &nodes, x.nrows()).unwrap();
        let xn = tape.constant(x.clone()).unwrap();
        let y = ctx.eval(&mut tape, xn).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn lorenz_constant_input() {
        // constant vector c maps to (8 - c) everywhere; equilibrium at 8
        for (c, expect) in [(3.0, 5.0), (8.0, 0.0)] {
            let x = Array2::from_elem((6, 1), c);
            let f = lorenz96_field_plain(&x).unwrap();
            for v in f.iter() {
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lorenz_hand_value() {
        let x = arr2(&[[1.0], [2.0], [3.0], [4.0], [5.0]]);
        let f = lorenz96_field_plain(&x).unwrap();
        // component 0: -x4 (x3 - x1) - x0 + 8 = -5(4-2) - 1 + 8 = -3
        assert!((f[(0, 0)] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn lorenz_rejects_small_dimension() {
        let x = Array2::zeros((3, 1));
        assert!(lorenz96_field_plain(&x).is_err());
    }

    #[test]
    fn poly18_bias_and_linear_features() {
        let x = arr2(&[[0.3], [1.0], [-0.5], [2.0], [0.7]]);
        // bias feature only: constant field
        let mut alpha = [0.0; 18];
        alpha[0] = 4.5;
        let f = poly18_field_plain(&alpha, &x).unwrap();
        for v in f.iter() {
            assert!((v - 4.5).abs() < 1e-12);
        }
        // feature 3 is the coordinate itself
        let mut alpha = [0.0; 18];
        alpha[3] = 1.0;
        let f = poly18_field_plain(&alpha, &x).unwrap();
        for (a, b) in f.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn poly18_reference_coeffs_reproduce_reference_field() {
        let coeffs = poly18_reference_coeffs();
        let mut rng = crate::rng::substream(11, "poly-check", &[]);
        use crate::rng::NoiseSource;
        for _ in 0..100 {
            let x = rng.standard_normal(7, 1) * 3.0;
            let a = poly18_field_plain(&coeffs, &x).unwrap();
            let b = lorenz96_field_plain(&x).unwrap();
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_and_plain_fields_agree() {
        let x = Array2::from_shape_fn((8, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin() * 2.0);
        let tape_val = eval_tape_field(&VectorFieldSpec::Lorenz96, &[], &x);
        let plain = lorenz96_field_plain(&x).unwrap();
        for (a, b) in tape_val.iter().zip(plain.iter()) {
            assert!((a - b).abs() < 1e-13);
        }

        let coeffs: Vec<f64> = (0..18).map(|k| ((k as f64) * 0.11).cos()).collect();
        let tape_val = eval_tape_field(&VectorFieldSpec::Poly18, &coeffs, &x);
        let plain = poly18_field_plain(&coeffs, &x).unwrap();
        for (a, b) in tape_val.iter().zip(plain.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn circular_shift_equivariance() {
        let x = Array2::from_shape_fn((9, 1), |(i, _)| (i as f64 * 0.71).cos() * 4.0);
        let shift = |m: &Array2<f64>| {
            let d = m.nrows();
            let mut out = m.clone();
            for i in 0..d {
                out[(i, 0)] = m[((i + 1) % d, 0)];
            }
            out
        };
        let coeffs = poly18_reference_coeffs();
        for f in [
            Box::new(|x: &Array2<f64>| lorenz96_field_plain(x).unwrap())
                as Box<dyn Fn(&Array2<f64>) -> Array2<f64>>,
            Box::new(move |x: &Array2<f64>| poly18_field_plain(&coeffs, x).unwrap()),
        ] {
            let lhs = f(&shift(&x));
            let rhs = shift(&f(&x));
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rk4_zero_field_is_identity() {
        let x = arr2(&[[1.0], [2.0], [-0.5], [0.1], [3.0]]);
        let out = rk4_flow_plain(&VectorFieldSpec::Poly18, &[0.0; 18], &x, 0.01, 5).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn rk4_exponential_decay_and_order() {
        // scalar field f(x) = -x via the polynomial basis (coefficient -1 on
        // the own-coordinate feature); exact flow is e^{-t}
        let mut alpha = [0.0; 18];
        alpha[3] = -1.0;
        let x0 = Array2::from_elem((5, 1), 1.0);
        let out = rk4_flow_plain(&VectorFieldSpec::Poly18, &alpha, &x0, 0.01, 5).unwrap();
        let exact = (-0.05f64).exp();
        assert!((out[(0, 0)] - exact).abs() < 1e-10);

        // global error scales like dt^4
        let err_at = |dt: f64, steps: usize| {
            let out = rk4_flow_plain(&VectorFieldSpec::Poly18, &alpha, &x0, dt, steps).unwrap();
            (out[(0, 0)] - (-(dt * steps as f64)).exp()).abs()
        };
        let e1 = err_at(0.1, 10);
        let e2 = err_at(0.05, 20);
        let slope = (e1 / e2).log2();
        assert!((slope - 4.0).abs() < 0.35, "observed order {slope}");
    }

    #[test]
    fn rk4_blowup_guard_names_step() {
        // f(x) = x^2 via the squared own-coordinate feature blows up fast
        let mut alpha = [0.0; 18];
        alpha[8] = 1.0;
        let x0 = Array2::from_elem((5, 1), 10.0);
        match rk4_flow_plain(&VectorFieldSpec::Poly18, &alpha, &x0, 0.5, 100) {
            Err(Error::BlowUp { .. }) => {}
            other => panic!("expected blow-up, got {other:?}"),
        }
    }
}
