//! Convolutional surrogate vector field on the circular domain.
//!
//! Three conv layers: the first lifts each state to 3*`groups` channels
//! (kernel 5, circular); its output is split into three groups, and the
//! second layer consumes the concatenation of group 1 with the pointwise
//! product of groups 2 and 3 (the multiplicative gate supplies the quadratic
//! interactions the dynamics need); a final width-1 conv projects back to one
//! channel. No other nonlinearity. The architecture is valid for any d_x and
//! shift-equivariant by construction.

use ndarray::Array2;
use rand::Rng;

use super::col_from;
use crate::ad::{ops, NodeId, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NnArch {
    /// channels out of the first conv; must be 3 * groups
    pub c1_out: usize,
    pub groups: usize,
    /// channels out of the second conv
    pub c2_out: usize,
    /// kernel width of the first two convs (odd); the third is width 1
    pub k: usize,
}

impl Default for NnArch {
    fn default() -> Self {
        Self {
            c1_out: 72,
            groups: 24,
            c2_out: 37,
            k: 5,
        }
    }
}

impl NnArch {
    pub fn c2_in(&self) -> usize {
        2 * self.groups
    }

    /// Per-layer (weights, bias) sizes in flat layout order.
    pub fn alpha_blocks(&self) -> Vec<(String, usize)> {
        vec![
            ("cnn1_w".into(), self.c1_out * self.k),
            ("cnn1_b".into(), self.c1_out),
            ("cnn2_w".into(), self.c2_out * self.c2_in() * self.k),
            ("cnn2_b".into(), self.c2_out),
            ("cnn3_w".into(), self.c2_out),
            ("cnn3_b".into(), 1),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.alpha_blocks().iter().map(|(_, l)| l).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.c1_out != 3 * self.groups {
            return Err(Error::Domain(format!(
                "first conv must emit 3 x {} channels, got {}",
                self.groups, self.c1_out
            )));
        }
        if self.k % 2 == 0 {
            return Err(Error::EvenKernel { k: self.k });
        }
        Ok(())
    }

    /// Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for
    /// weights and biases alike (the convention of the common NN libraries).
    pub fn init_weights<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        let layers = [
            (1 * self.k, self.c1_out * self.k, self.c1_out),
            (self.c2_in() * self.k, self.c2_out * self.c2_in() * self.k, self.c2_out),
            (self.c2_out, self.c2_out, 1),
        ];
        for (fan_in, w_len, b_len) in layers {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..w_len {
                out.push(rng.random_range(-bound..bound));
            }
            for _ in 0..b_len {
                out.push(rng.random_range(-bound..bound));
            }
        }
        out
    }
}

/// Weight nodes reshaped for the conv ops, prepared once per tape.
pub struct NnCtx {
    arch: NnArch,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    w3: NodeId,
    b3: NodeId,
}

pub fn prepare_nn(tape: &mut Tape, arch: &NnArch, alpha: NodeId) -> Result<NnCtx> {
    arch.validate()?;
    if tape.value(alpha).dim() != (arch.param_count(), 1) {
        return Err(Error::Shape {
            op: "prepare_nn",
            detail: format!(
                "alpha is {:?}, architecture takes {} weights",
                tape.value(alpha).dim(),
                arch.param_count()
            ),
        });
    }
    let mut offset = 0usize;
    let mut take = |tape: &mut Tape, len: usize| -> Result<NodeId> {
        let s = tape.slice_rows(alpha, offset, len)?;
        offset += len;
        Ok(s)
    };
    let w1 = take(tape, arch.c1_out * arch.k)?;
    let w1 = tape.reshape(w1, arch.c1_out, arch.k)?;
    let b1 = take(tape, arch.c1_out)?;
    let w2 = take(tape, arch.c2_out * arch.c2_in() * arch.k)?;
    let w2 = tape.reshape(w2, arch.c2_out, arch.c2_in() * arch.k)?;
    let b2 = take(tape, arch.c2_out)?;
    let w3 = take(tape, arch.c2_out)?;
    let w3 = tape.reshape(w3, 1, arch.c2_out)?;
    let b3 = take(tape, 1)?;
    Ok(NnCtx {
        arch: arch.clone(),
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
    })
}

/// Apply the surrogate field to a d_x x N ensemble node (columns are treated
/// as a batch; output has the same shape).
pub fn nn_field(tape: &mut Tape, ctx: &NnCtx, x: NodeId) -> Result<NodeId> {
    let (_, n) = tape.value(x).dim();
    let a = &ctx.arch;
    let xt = tape.transpose(x)?; // N x d, one channel per particle
    let h1 = tape.conv1d_circular(xt, ctx.w1, ctx.b1, n, 1, a.c1_out, a.k)?;
    let g1 = tape.slice_channels(h1, n, a.c1_out, 0, a.groups)?;
    let g2 = tape.slice_channels(h1, n, a.c1_out, a.groups, a.groups)?;
    let g3 = tape.slice_channels(h1, n, a.c1_out, 2 * a.groups, a.groups)?;
    let gate = tape.hadamard(g2, g3)?;
    let h2in = tape.concat_channels(g1, gate, n, a.groups, a.groups)?;
    let h2 = tape.conv1d_circular(h2in, ctx.w2, ctx.b2, n, a.c2_in(), a.c2_out, a.k)?;
    let h3 = tape.conv1d_circular(h2, ctx.w3, ctx.b3, n, a.c2_out, 1, 1)?;
    tape.transpose(h3)
}

/// Value-only evaluation sharing the conv kernel with the tape op.
pub fn nn_field_plain(arch: &NnArch, alpha: &[f64], x: &Array2<f64>) -> Result<Array2<f64>> {
    arch.validate()?;
    if alpha.len() != arch.param_count() {
        return Err(Error::Shape {
            op: "nn_field",
            detail: format!("{} weights given, architecture takes {}", alpha.len(), arch.param_count()),
        });
    }
    let n = x.ncols();
    let mut offset = 0usize;
    let mut take_mat = |rows: usize, cols: usize| -> Array2<f64> {
        let m = Array2::from_shape_vec((rows, cols), alpha[offset..offset + rows * cols].to_vec())
            .expect("weight layout");
        offset += rows * cols;
        m
    };
    let w1 = take_mat(arch.c1_out, arch.k);
    let b1 = col_from(&alpha[offset..offset + arch.c1_out]);
    offset += arch.c1_out;
    let w2 = {
        let m = Array2::from_shape_vec(
            (arch.c2_out, arch.c2_in() * arch.k),
            alpha[offset..offset + arch.c2_out * arch.c2_in() * arch.k].to_vec(),
        )
        .expect("weight layout");
        offset += arch.c2_out * arch.c2_in() * arch.k;
        m
    };
    let b2 = col_from(&alpha[offset..offset + arch.c2_out]);
    offset += arch.c2_out;
    let w3 = Array2::from_shape_vec((1, arch.c2_out), alpha[offset..offset + arch.c2_out].to_vec())
        .expect("weight layout");
    offset += arch.c2_out;
    let b3 = col_from(&alpha[offset..offset + 1]);

    let xt = x.t().to_owned();
    let h1 = ops::conv1d_forward(&xt, &w1, &b1, n, 1, arch.c1_out, arch.k)?;
    let d = x.nrows();
    let g = arch.groups;
    let mut h2in = Array2::zeros((n * arch.c2_in(), d));
    for b in 0..n {
        for c in 0..g {
            let g1 = h1.row(b * arch.c1_out + c);
            h2in.row_mut(b * arch.c2_in() + c).assign(&g1);
            let g2 = h1.row(b * arch.c1_out + g + c).to_owned();
            let g3 = h1.row(b * arch.c1_out + 2 * g + c);
            let gate = &g2 * &g3;
            h2in.row_mut(b * arch.c2_in() + g + c).assign(&gate);
        }
    }
    let h2 = ops::conv1d_forward(&h2in, &w2, &b2, n, arch.c2_in(), arch.c2_out, arch.k)?;
    let h3 = ops::conv1d_forward(&h2, &w3, &b3, n, arch.c2_out, 1, 1)?;
    Ok(h3.t().to_owned())
}

/// Seeded weight draw for reproducible initialization.
pub fn random_weights(arch: &NnArch, seed: u64) -> Vec<f64> {
    let mut rng = crate::rng::substream(seed, "nn-init", &[]);
    arch.init_weights(&mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{register_theta, ThetaParams};

    #[test]
    fn parameter_count_matches_architecture_formula() {
        let arch = NnArch::default();
        // 1*72*5 + 72 + 48*37*5 + 37 + 37*1*1 + 1
        let expect = 72 * 5 + 72 + 48 * 37 * 5 + 37 + 37 + 1;
        assert_eq!(arch.param_count(), expect);
        assert_eq!(expect, 9387);
    }

    #[test]
    fn zero_weights_give_constant_bias_output() {
        let arch = NnArch::default();
        let mut alpha = vec![0.0; arch.param_count()];
        *alpha.last_mut().unwrap() = 1.75; // final bias
        let x = Array2::from_shape_fn((10, 3), |(i, j)| (i as f64 - j as f64) * 0.4);
        let out = nn_field_plain(&arch, &alpha, &x).unwrap();
        for v in out.iter() {
            assert!((v - 1.75).abs() < 1e-14);
        }
    }

    #[test]
    fn tape_and_plain_agree() {
        let arch = NnArch { c1_out: 6, groups: 2, c2_out: 5, k: 3 };
        let alpha = random_weights(&arch, 3);
        let x = Array2::from_shape_fn((7, 4), |(i, j)| ((i + 2 * j) as f64 * 0.3).sin());
        let plain = nn_field_plain(&arch, &alpha, &x).unwrap();

        let mut tape = Tape::new();
        let theta = ThetaParams { alpha: alpha.clone(), beta: vec![] };
        let nodes = register_theta(&mut tape, &theta).unwrap();
        let ctx = prepare_nn(&mut tape, &arch, nodes.alpha.unwrap()).unwrap();
        let xn = tape.constant(x).unwrap();
        let y = nn_field(&mut tape, &ctx, xn).unwrap();
        for (a, b) in tape.value(y).iter().zip(plain.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_equivariance() {
        let arch = NnArch::default();
        let alpha = random_weights(&arch, 5);
        let d = 12;
        let x = Array2::from_shape_fn((d, 1), |(i, _)| (i as f64 * 0.9).cos() * 2.0);
        let mut xs = Array2::zeros((d, 1));
        for i in 0..d {
            xs[(i, 0)] = x[((i + 1) % d, 0)];
        }
        let f = nn_field_plain(&arch, &alpha, &x).unwrap();
        let fs = nn_field_plain(&arch, &alpha, &xs).unwrap();
        for i in 0..d {
            assert!((fs[(i, 0)] - f[((i + 1) % d, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_columns_are_independent() {
        let arch = NnArch { c1_out: 6, groups: 2, c2_out: 4, k: 3 };
        let alpha = random_weights(&arch, 9);
        let x = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 7 + j * 3) as f64 * 0.21).sin());
        let full = nn_field_plain(&arch, &alpha, &x).unwrap();
        for j in 0..3 {
            let single = nn_field_plain(&arch, &alpha, &x.column(j).to_owned().insert_axis(ndarray::Axis(1)))
                .unwrap();
            for i in 0..6 {
                assert!((full[(i, j)] - single[(i, 0)]).abs() < 1e-13);
            }
        }
    }
}
