//! Statistical test helpers for the sampling-law checks.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Pearson chi-square goodness-of-fit p-value of observed counts against a
/// categorical law `probs` (counts and probs aligned; probs sum to 1).
pub fn chi2_gof_pvalue(counts: &[u64], probs: &[f64]) -> f64 {
    assert_eq!(counts.len(), probs.len());
    let n: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut dof = 0usize;
    for (&c, &p) in counts.iter().zip(probs) {
        let expect = n as f64 * p;
        if expect < 1e-12 {
            assert_eq!(c, 0, "observed count in a zero-probability cell");
            continue;
        }
        stat += (c as f64 - expect).powi(2) / expect;
        dof += 1;
    }
    assert!(dof >= 2, "need at least two cells");
    let chi = ChiSquared::new((dof - 1) as f64).unwrap();
    1.0 - chi.cdf(stat)
}

/// Sample mean and standard error.
pub fn mean_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
