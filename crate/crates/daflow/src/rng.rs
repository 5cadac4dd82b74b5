//! Seeded, counter-based random streams.
//!
//! Every stochastic component draws from a ChaCha substream derived from the
//! master seed plus a structured label, so replicates and per-sequence
//! filters are independent, parallel-safe, and exactly reproducible (resume
//! recomputes the same stream instead of persisting generator state).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Derive an independent substream from (master seed, label, ids).
pub fn substream(master: u64, label: &str, ids: &[u64]) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    for id in ids {
        hasher.update(id.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}

/// Source of standard-normal draws consumed by the filters. Column-major
/// fill order is part of the contract: matched draws can be permuted or
/// replayed by tests.
pub trait NoiseSource {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Array2<f64>;
    /// Uniform in [0, 1), for resampling ancestors.
    fn uniform(&mut self) -> f64;
}

impl<R: Rng> NoiseSource for R {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let mut out = Array2::zeros((rows, cols));
        for j in 0..cols {
            for i in 0..rows {
                out[(i, j)] = self.sample(StandardNormal);
            }
        }
        out
    }

    fn uniform(&mut self) -> f64 {
        self.random::<f64>()
    }
}

/// Records every draw passing through, for later replay.
pub struct RecordingSource<'a, S: NoiseSource> {
    pub inner: &'a mut S,
    pub log: Vec<Array2<f64>>,
    pub uniforms: Vec<f64>,
}

impl<'a, S: NoiseSource> RecordingSource<'a, S> {
    pub fn new(inner: &'a mut S) -> Self {
        Self {
            inner,
            log: Vec::new(),
            uniforms: Vec::new(),
        }
    }
}

impl<S: NoiseSource> NoiseSource for RecordingSource<'_, S> {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let draw = self.inner.standard_normal(rows, cols);
        self.log.push(draw.clone());
        draw
    }

    fn uniform(&mut self) -> f64 {
        let u = self.inner.uniform();
        self.uniforms.push(u);
        u
    }
}

/// Replays a recorded draw sequence; panics on shape drift, which would mean
/// the replayed computation diverged from the recorded one.
pub struct ReplaySource {
    draws: std::collections::VecDeque<Array2<f64>>,
    uniforms: std::collections::VecDeque<f64>,
}

impl ReplaySource {
    pub fn new(draws: Vec<Array2<f64>>, uniforms: Vec<f64>) -> Self {
        Self {
            draws: draws.into(),
            uniforms: uniforms.into(),
        }
    }
}

impl NoiseSource for ReplaySource {
    fn standard_normal(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let draw = self.draws.pop_front().expect("replay exhausted");
        assert_eq!(draw.dim(), (rows, cols), "replayed draw shape drifted");
        draw
    }

    fn uniform(&mut self) -> f64 {
        self.uniforms.pop_front().expect("replay exhausted")
    }
}
