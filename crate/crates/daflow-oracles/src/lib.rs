//! Independent brute-force oracles used by the daflow test suites.
//!
//! Nothing in this crate calls daflow's numerical kernels; the dependency
//! direction (daflow dev-depends on this crate, never the reverse) keeps
//! oracle and subject implementations apart.

pub mod fd;
pub mod kalman;
pub mod lsq;
pub mod stats;
