//! Operation set of the tape: forward evaluation and adjoint propagation.
//!
//! Every op's forward pass is a pure function of its parent values, so a
//! recorded tape can be replayed bit-exactly. Adjoint rules follow standard
//! matrix calculus; the Cholesky rule is the triangular-solve form
//! `sym(L^{-T} phi(L^T Lbar) L^{-1})`.

use ndarray::{Array2, Axis};

use super::linalg;
use crate::error::{Error, Result};

pub type Value = Array2<f64>;

#[derive(Debug, Clone)]
pub enum Op {
    Leaf { differentiable: bool },
    Add,
    Sub,
    Hadamard,
    Matmul,
    Transpose,
    Scale(f64),
    /// scalar node (1x1) times matrix node
    Smul,
    /// row shift by `offset`: out[i] = in[i + offset]; circular wraps,
    /// non-circular fills with zeros
    ShiftRows { offset: i64, circular: bool },
    ConcatRows { top_rows: usize },
    SliceRows { start: usize, len: usize },
    /// channel-block slice of a (batch*ch) x d matrix
    SliceChannels { batch: usize, ch: usize, start: usize, len: usize },
    /// channel-block concat of two (batch*ch) x d matrices
    ConcatChannels { batch: usize, ch_a: usize, ch_b: usize },
    /// row-major relayout to (rows, cols); element count must match
    Reshape { rows: usize, cols: usize },
    Sum,
    ColSums,
    MeanCols,
    BroadcastCol { cols: usize },
    DiagFromCol,
    Exp,
    Softplus,
    LogSumExp,
    Cholesky,
    PsdSolve,
    Logdet,
    /// parents [x, kernel, bias]; x is (batch*in_ch) x d,
    /// kernel is out_ch x (in_ch*k), bias is out_ch x 1
    Conv1dCircular { batch: usize, in_ch: usize, out_ch: usize, k: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Hadamard => "hadamard",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Scale(_) => "scale",
            Op::Smul => "smul",
            Op::ShiftRows { .. } => "shift_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceChannels { .. } => "slice_channels",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Reshape { .. } => "reshape",
            Op::Sum => "sum",
            Op::ColSums => "col_sums",
            Op::MeanCols => "mean_cols",
            Op::BroadcastCol { .. } => "broadcast_col",
            Op::DiagFromCol => "diag_from_col",
            Op::Exp => "exp",
            Op::Softplus => "softplus",
            Op::LogSumExp => "logsumexp",
            Op::Cholesky => "cholesky",
            Op::PsdSolve => "psd_solve",
            Op::Logdet => "logdet",
            Op::Conv1dCircular { .. } => "conv1d_circular",
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn same_shape(op: &'static str, a: &Value, b: &Value) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", a.dim(), b.dim()),
        ));
    }
    Ok(())
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shift_rows(x: &Value, offset: i64, circular: bool) -> Value {
    let (d, n) = x.dim();
    let mut out = Value::zeros((d, n));
    for i in 0..d as i64 {
        let src = i + offset;
        let src = if circular {
            src.rem_euclid(d as i64)
        } else if src < 0 || src >= d as i64 {
            continue;
        } else {
            src
        };
        out.row_mut(i as usize).assign(&x.row(src as usize));
    }
    out
}

/// Forward evaluation of `op` on parent values. Pure; reused for replay.
pub fn eval(op: &Op, parents: &[&Value]) -> Result<Value> {
    let name = op.name();
    let v = match op {
        Op::Leaf { .. } => parents
            .first()
            .map(|p| (*p).clone())
            .ok_or_else(|| shape_err(name, "leaf without value".into()))?,
        Op::Add => {
            same_shape(name, parents[0], parents[1])?;
            parents[0] + parents[1]
        }
        Op::Sub => {
            same_shape(name, parents[0], parents[1])?;
            parents[0] - parents[1]
        }
        Op::Hadamard => {
            same_shape(name, parents[0], parents[1])?;
            parents[0] * parents[1]
        }
        Op::Matmul => {
            let (a, b) = (parents[0], parents[1]);
            if a.ncols() != b.nrows() {
                return Err(shape_err(name, format!("{:?} x {:?}", a.dim(), b.dim())));
            }
            a.dot(b)
        }
        Op::Transpose => parents[0].t().to_owned(),
        Op::Scale(c) => parents[0] * *c,
        Op::Smul => {
            let s = parents[0];
            if s.dim() != (1, 1) {
                return Err(shape_err(name, format!("scalar operand is {:?}", s.dim())));
            }
            parents[1] * s[(0, 0)]
        }
        Op::ShiftRows { offset, circular } => shift_rows(parents[0], *offset, *circular),
        Op::ConcatRows { top_rows } => {
            let (a, b) = (parents[0], parents[1]);
            if a.ncols() != b.ncols() || a.nrows() != *top_rows {
                return Err(shape_err(name, format!("{:?} over {:?}", a.dim(), b.dim())));
            }
            let mut out = Value::zeros((a.nrows() + b.nrows(), a.ncols()));
            out.slice_mut(ndarray::s![..a.nrows(), ..]).assign(a);
            out.slice_mut(ndarray::s![a.nrows().., ..]).assign(b);
            out
        }
        Op::SliceRows { start, len } => {
            let a = parents[0];
            if start + len > a.nrows() {
                return Err(shape_err(
                    name,
                    format!("rows {}..{} of {:?}", start, start + len, a.dim()),
                ));
            }
            a.slice(ndarray::s![*start..start + len, ..]).to_owned()
        }
        Op::SliceChannels { batch, ch, start, len } => {
            let a = parents[0];
            if a.nrows() != batch * ch || start + len > *ch {
                return Err(shape_err(
                    name,
                    format!("channels {}..{} of {} in {:?}", start, start + len, ch, a.dim()),
                ));
            }
            let d = a.ncols();
            let mut out = Value::zeros((batch * len, d));
            for b in 0..*batch {
                for c in 0..*len {
                    out.row_mut(b * len + c).assign(&a.row(b * ch + start + c));
                }
            }
            out
        }
        Op::ConcatChannels { batch, ch_a, ch_b } => {
            let (a, b) = (parents[0], parents[1]);
            if a.nrows() != batch * ch_a || b.nrows() != batch * ch_b || a.ncols() != b.ncols() {
                return Err(shape_err(name, format!("{:?} with {:?}", a.dim(), b.dim())));
            }
            let d = a.ncols();
            let ch = ch_a + ch_b;
            let mut out = Value::zeros((batch * ch, d));
            for bi in 0..*batch {
                for c in 0..*ch_a {
                    out.row_mut(bi * ch + c).assign(&a.row(bi * ch_a + c));
                }
                for c in 0..*ch_b {
                    out.row_mut(bi * ch + ch_a + c).assign(&b.row(bi * ch_b + c));
                }
            }
            out
        }
        Op::Reshape { rows, cols } => {
            let a = parents[0];
            if a.len() != rows * cols {
                return Err(shape_err(name, format!("{:?} into ({}, {})", a.dim(), rows, cols)));
            }
            let flat: Vec<f64> = a.iter().copied().collect();
            Value::from_shape_vec((*rows, *cols), flat)
                .map_err(|e| shape_err(name, e.to_string()))?
        }
        Op::Sum => Value::from_elem((1, 1), parents[0].sum()),
        Op::ColSums => {
            let a = parents[0];
            let mut out = Value::zeros((1, a.ncols()));
            for (j, col) in a.columns().into_iter().enumerate() {
                out[(0, j)] = col.sum();
            }
            out
        }
        Op::MeanCols => {
            let a = parents[0];
            let n = a.ncols() as f64;
            a.sum_axis(Axis(1)).insert_axis(Axis(1)) / n
        }
        Op::BroadcastCol { cols } => {
            let a = parents[0];
            if a.ncols() != 1 {
                return Err(shape_err(name, format!("expected column vector, got {:?}", a.dim())));
            }
            let mut out = Value::zeros((a.nrows(), *cols));
            for mut col in out.columns_mut() {
                col.assign(&a.column(0));
            }
            out
        }
        Op::DiagFromCol => {
            let a = parents[0];
            if a.ncols() != 1 {
                return Err(shape_err(name, format!("expected column vector, got {:?}", a.dim())));
            }
            let d = a.nrows();
            let mut out = Value::zeros((d, d));
            for i in 0..d {
                out[(i, i)] = a[(i, 0)];
            }
            out
        }
        Op::Exp => parents[0].mapv(f64::exp),
        Op::Softplus => parents[0].mapv(softplus_scalar),
        Op::LogSumExp => {
            let a = parents[0];
            let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return Err(Error::NonFinite { op: name });
            }
            let s: f64 = a.iter().map(|&x| (x - m).exp()).sum();
            Value::from_elem((1, 1), m + s.ln())
        }
        Op::Cholesky => linalg::cholesky_psd(parents[0], name)?,
        Op::PsdSolve => {
            let (a, b) = (parents[0], parents[1]);
            if a.nrows() != b.nrows() {
                return Err(shape_err(name, format!("{:?} with rhs {:?}", a.dim(), b.dim())));
            }
            linalg::psd_solve_plain(a, b, name)?
        }
        Op::Logdet => {
            let l = linalg::cholesky_psd(parents[0], name)?;
            let ld: f64 = 2.0 * l.diag().iter().map(|x| x.ln()).sum::<f64>();
            Value::from_elem((1, 1), ld)
        }
        Op::Conv1dCircular { batch, in_ch, out_ch, k } => {
            conv1d_forward(parents[0], parents[1], parents[2], *batch, *in_ch, *out_ch, *k)?
        }
    };
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: name });
    }
    Ok(v)
}

/// im2col patch matrix: (in_ch*k) x (batch*d), circular in the spatial index.
fn conv_patches(x: &Value, batch: usize, in_ch: usize, k: usize) -> Value {
    let d = x.ncols();
    let h = (k as i64 - 1) / 2;
    let mut pa = Value::zeros((in_ch * k, batch * d));
    for b in 0..batch {
        for ic in 0..in_ch {
            let row = x.row(b * in_ch + ic);
            for kk in 0..k {
                let off = kk as i64 - h;
                let mut dst = pa.row_mut(ic * k + kk);
                for i in 0..d {
                    let src = (i as i64 + off).rem_euclid(d as i64) as usize;
                    dst[b * d + i] = row[src];
                }
            }
        }
    }
    pa
}

pub(crate) fn conv1d_forward(
    x: &Value,
    w: &Value,
    bias: &Value,
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    k: usize,
) -> Result<Value> {
    let name = "conv1d_circular";
    if k % 2 == 0 {
        return Err(Error::EvenKernel { k });
    }
    if x.nrows() != batch * in_ch {
        return Err(shape_err(name, format!("input {:?}, batch {} x in_ch {}", x.dim(), batch, in_ch)));
    }
    if w.dim() != (out_ch, in_ch * k) {
        return Err(shape_err(name, format!("kernel {:?}, expected ({}, {})", w.dim(), out_ch, in_ch * k)));
    }
    if bias.dim() != (out_ch, 1) {
        return Err(shape_err(name, format!("bias {:?}, expected ({}, 1)", bias.dim(), out_ch)));
    }
    let d = x.ncols();
    let pa = conv_patches(x, batch, in_ch, k);
    let y = w.dot(&pa); // out_ch x (batch*d)
    let mut out = Value::zeros((batch * out_ch, d));
    for b in 0..batch {
        for oc in 0..out_ch {
            let bv = bias[(oc, 0)];
            let src = y.row(oc);
            let mut dst = out.row_mut(b * out_ch + oc);
            for i in 0..d {
                dst[i] = src[b * d + i] + bv;
            }
        }
    }
    Ok(out)
}

/// Accumulate `delta` into an adjoint slot.
pub fn accumulate(slot: &mut Option<Value>, delta: Value) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta),
    }
}

/// Propagate the adjoint `g` of a node to its parents.
///
/// `values[i]` is the recorded value of parent `i`, `out` the node's own
/// value, and `sinks[i]` the adjoint slot of parent `i` (`None` when the
/// parent does not require gradients).
pub fn propagate(
    op: &Op,
    g: &Value,
    values: &[&Value],
    out: &Value,
    sinks: &mut [Option<&mut Option<Value>>],
) -> Result<()> {
    match op {
        Op::Leaf { .. } => {}
        Op::Add => {
            if let Some(s) = sinks[0].as_mut() {
                accumulate(s, g.clone());
            }
            if let Some(s) = sinks[1].as_mut() {
                accumulate(s, g.clone());
            }
        }
        Op::Sub => {
            if let Some(s) = sinks[0].as_mut() {
                accumulate(s, g.clone());
            }
            if let Some(s) = sinks[1].as_mut() {
                accumulate(s, -g.clone());
            }
        }
        Op::Hadamard => {
            if let Some(s) = sinks[0].as_mut() {
                accumulate(s, g * values[1]);
            }
            if let Some(s) = sinks[1].as_mut() {
                accumulate(s, g * values[0]);
            }
        }
        Op::Matmul => {
            if let Some(s) = sinks[0].as_mut() {
                accumulate(s, g.dot(&values[1].t()));
            }
            if let Some(s) = sinks[1].as_mut() {
                accumulate(s, values[0].t().dot(g));
            }
        }
        Op::Transpose => {
            if let Some(s) = sinks[0].as_mut() {
                accumulate(s, g.t().to_owned());
            }
        }
        Op::Scale(c) => {
            if let Some(s) = sinks[0].as_mut() {
                accumulate(s, g * *c);
            }
        }
        Op::Smul => {
            if let Some(s) = sinks[0].as_mut() {
                accumulate(s, Value::from_elem((1, 1), (g * values[1]).sum()));
            }
            if let Some(s) = sinks[1].as_mut() {
                accumulate(s, g * values[0][(0, 0)]);
            }
        }
        Op::ShiftRows { offset, circular } => {
            if let Some(s) = sinks[0].as_mut() {
                accumulate(s, shift_rows(g, -offset, *circular));
            }
        }
        Op::ConcatRows { top_rows } => {
            if let Some(s) = sinks[0].as_mut() {
                accumulate(s, g.slice(ndarray::s![..*top_rows, ..]).to_owned());
            }
            if let Some(s) = sinks[1].as_mut() {
                accumulate(s, g.slice(ndarray::s![*top_rows.., ..]).to_owned());
            }
        }
        Op::SliceRows { start, len } => {
            if let Some(s) = sinks[0].as_mut() {
                let mut full = Value::zeros(values[0].dim());
                full.slice_mut(ndarray::s![*start..start + len, ..]).assign(g);
                accumulate(s, full);
            }
        }
        Op::SliceChannels { batch, ch, start, len } => {
            if let Some(s) = sinks[0].as_mut() {
                let mut full = Value::zeros(values[0].dim());
                for b in 0..*batch {
                    for c in 0..*len {
                        full.row_mut(b * ch + start + c).assign(&g.row(b * len + c));
                    }
                }
                accumulate(s, full);
            }
        }
        Op::ConcatChannels { batch, ch_a, ch_b } => {
            let ch = ch_a + ch_b;
            if let Some(s) = sinks[0].as_mut() {
                let mut ga = Value::zeros(values[0].dim());
                for b in 0..*batch {
                    for c in 0..*ch_a {
                        ga.row_mut(b * ch_a + c).assign(&g.row(b * ch + c));
                    }
                }
                accumulate(s, ga);
            }
            if let Some(s) = sinks[1].as_mut() {
                let mut gb = Value::zeros(values[1].dim());
                for b in 0..*batch {
                    for c in 0..*ch_b {
                        gb.row_mut(b * ch_b + c).assign(&g.row(b * ch + ch_a + c));
                    }
                }
                accumulate(s, gb);
            }
        }
        Op::Reshape { .. } => {
            if let Some(s) = sinks[0].as_mut() {
                let flat: Vec<f64> = g.iter().copied().collect();
                let back = Value::from_shape_vec(values[0].dim(), flat)
                    .expect("reshape adjoint relayout");
                accumulate(s, back);
            }
        }
        Op::Sum => {
            if let Some(s) = sinks[0].as_mut() {
                accumulate(s, Value::from_elem(values[0].dim(), g[(0, 0)]));
            }
        }
        Op::ColSums => {
            if let Some(s) = sinks[0].as_mut() {
                let (d, n) = values[0].dim();
                let mut full = Value::zeros((d, n));
                for i in 0..d {
                    for j in 0..n {
                        full[(i, j)] = g[(0, j)];
                    }
                }
                accumulate(s, full);
            }
        }
        Op::MeanCols => {
            if let Some(s) = sinks[0].as_mut() {
                let (d, n) = values[0].dim();
                let inv = 1.0 / n as f64;
                let mut full = Value::zeros((d, n));
                for i in 0..d {
                    for j in 0..n {
                        full[(i, j)] = g[(i, 0)] * inv;
                    }
                }
                accumulate(s, full);
            }
        }
        Op::BroadcastCol { .. } => {
            if let Some(s) = sinks[0].as_mut() {
                accumulate(s, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
        }
        Op::DiagFromCol => {
            if let Some(s) = sinks[0].as_mut() {
                let d = values[0].nrows();
                let mut col = Value::zeros((d, 1));
                for i in 0..d {
                    col[(i, 0)] = g[(i, i)];
                }
                accumulate(s, col);
            }
        }
        Op::Exp => {
            if let Some(s) = sinks[0].as_mut() {
                accumulate(s, g * out);
            }
        }
        Op::Softplus => {
            if let Some(s) = sinks[0].as_mut() {
                accumulate(s, g * &values[0].mapv(sigmoid_scalar));
            }
        }
        Op::LogSumExp => {
            if let Some(s) = sinks[0].as_mut() {
                let m = out[(0, 0)];
                accumulate(s, values[0].mapv(|x| (x - m).exp()) * g[(0, 0)]);
            }
        }
        Op::Cholesky => {
            if let Some(s) = sinks[0].as_mut() {
                let l = out;
                let p = l.t().dot(g);
                let d = l.nrows();
                let mut phi = Value::zeros((d, d));
                for i in 0..d {
                    for j in 0..=i {
                        phi[(i, j)] = if i == j { 0.5 * p[(i, j)] } else { p[(i, j)] };
                    }
                }
                // sym(L^{-T} phi L^{-1})
                let x = linalg::solve_lower_t(l, &phi);
                let y = linalg::solve_lower_t(l, &x.t().to_owned()).t().to_owned();
                accumulate(s, 0.5 * (&y + &y.t()));
            }
        }
        Op::PsdSolve => {
            let need_a = sinks[0].is_some();
            let need_b = sinks[1].is_some();
            if need_a || need_b {
                let l = linalg::cholesky_psd(values[0], "psd_solve")?;
                let bbar = linalg::solve_lower_t(&l, &linalg::solve_lower(&l, g));
                if let Some(s) = sinks[0].as_mut() {
                    let ga = -bbar.dot(&out.t());
                    accumulate(s, 0.5 * (&ga + &ga.t()));
                }
                if let Some(s) = sinks[1].as_mut() {
                    accumulate(s, bbar);
                }
            }
        }
        Op::Logdet => {
            if let Some(s) = sinks[0].as_mut() {
                let l = linalg::cholesky_psd(values[0], "logdet")?;
                let d = l.nrows();
                let inv = linalg::solve_lower_t(&l, &linalg::solve_lower(&l, &Array2::eye(d)));
                accumulate(s, &(0.5 * (&inv + &inv.t())) * g[(0, 0)]);
            }
        }
        Op::Conv1dCircular { batch, in_ch, out_ch, k } => {
            let d = values[0].ncols();
            let h = (*k as i64 - 1) / 2;
            // regroup upstream gradient to out_ch x (batch*d)
            let mut ybar = Value::zeros((*out_ch, batch * d));
            for b in 0..*batch {
                for oc in 0..*out_ch {
                    let src = g.row(b * out_ch + oc);
                    let mut dst = ybar.row_mut(oc);
                    for i in 0..d {
                        dst[b * d + i] = src[i];
                    }
                }
            }
            if let Some(s) = sinks[1].as_mut() {
                let pa = conv_patches(values[0], *batch, *in_ch, *k);
                accumulate(s, ybar.dot(&pa.t()));
            }
            if let Some(s) = sinks[2].as_mut() {
                accumulate(s, ybar.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            if let Some(s) = sinks[0].as_mut() {
                let pbar = values[1].t().dot(&ybar); // (in_ch*k) x (batch*d)
                let mut xbar = Value::zeros(values[0].dim());
                for b in 0..*batch {
                    for ic in 0..*in_ch {
                        let mut dst = xbar.row_mut(b * in_ch + ic);
                        for kk in 0..*k {
                            let off = kk as i64 - h;
                            let src = pbar.row(ic * k + kk);
                            for i in 0..d {
                                let tgt = (i as i64 + off).rem_euclid(d as i64) as usize;
                                dst[tgt] += src[b * d + i];
                            }
                        }
                    }
                }
                accumulate(s, xbar);
            }
        }
    }
    Ok(())
}
