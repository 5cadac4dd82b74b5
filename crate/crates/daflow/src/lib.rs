//! daflow: differentiable data assimilation.
//!
//! Learns the parameters of state-space dynamics by gradient ascent on an
//! ensemble-Kalman-filter estimate of the data log-likelihood, with exact
//! Kalman, particle-filter, and EM baselines for cross-validation.

pub mod ad;
pub mod error;
pub mod enkf;
pub mod kalman;
pub mod models;
pub mod opt;
pub mod em;
pub mod pf;
pub mod rng;

pub use error::{Error, Result};
