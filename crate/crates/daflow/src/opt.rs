//! Optimizer primitives shared by the training drivers, the EM inner loop,
//! and the reference-MLE solver: plain gradient ascent, Adam, and the
//! polynomial learning-rate decay.

use crate::error::{Error, Result};
use crate::models::ThetaParams;

/// Polynomial decay: eta_0 for the first `i0` iterations, then
/// eta_0 (i - i0)^(-tau). Iterations count from 1.
pub fn schedule_eta(i: usize, eta0: f64, i0: usize, tau: f64) -> f64 {
    if i <= i0 {
        eta0
    } else {
        eta0 * ((i - i0) as f64).powf(-tau)
    }
}

/// Per-block base learning rates (the dynamics and noise blocks of theta may
/// ascend at different speeds; the schedule multiplies both).
#[derive(Debug, Clone, Copy)]
pub struct BlockRates {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    PlainAscent,
    Adam,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state for gradient ascent over theta.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub rates: BlockRates,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: usize,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, rates: BlockRates, dim: usize) -> Self {
        Self {
            kind,
            rates,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            steps: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    /// Ascend: theta <- theta + step(grad). `scale` multiplies both block
    /// rates (the decay schedule value).
    pub fn update(&mut self, theta: &mut ThetaParams, grad: &ThetaParams, scale: f64) -> Result<()> {
        let flat_grad: Vec<f64> = grad.flatten();
        if flat_grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "optimizer_update" });
        }
        let alpha_len = theta.alpha.len();
        if flat_grad.len() != self.m.len() || theta.len() != self.m.len() {
            return Err(Error::Domain(format!(
                "optimizer dimension {} does not match theta {}",
                self.m.len(),
                theta.len()
            )));
        }
        self.steps += 1;
        let mut flat: Vec<f64> = theta.flatten();
        match self.kind {
            OptimizerKind::PlainAscent => {
                for (i, (x, g)) in flat.iter_mut().zip(&flat_grad).enumerate() {
                    let rate = if i < alpha_len { self.rates.alpha } else { self.rates.beta };
                    *x += scale * rate * g;
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let bc1 = 1.0 - ADAM_B1.powi(t);
                let bc2 = 1.0 - ADAM_B2.powi(t);
                for (i, (x, g)) in flat.iter_mut().zip(&flat_grad).enumerate() {
                    self.m[i] = ADAM_B1 * self.m[i] + (1.0 - ADAM_B1) * g;
                    self.v[i] = ADAM_B2 * self.v[i] + (1.0 - ADAM_B2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    let rate = if i < alpha_len { self.rates.alpha } else { self.rates.beta };
                    *x += scale * rate * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
        theta.alpha.copy_from_slice(&flat[..alpha_len]);
        theta.beta.copy_from_slice(&flat[alpha_len..]);
        Ok(())
    }

    /// (first moments, second moments) snapshot for checkpointing.
    pub fn state(&self) -> (&[f64], &[f64], usize) {
        (&self.m, &self.v, self.steps)
    }

    pub fn restore(&mut self, m: Vec<f64>, v: Vec<f64>, steps: usize) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Domain("optimizer state size mismatch".into()));
        }
        self.m = m;
        self.v = v;
        self.steps = steps;
        Ok(())
    }
}
