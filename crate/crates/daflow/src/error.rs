use std::fmt;

/// Crate-wide error type. Numeric kernels attach the operation tag; filter
/// loops wrap step errors with the time index.
#[derive(Debug)]
pub enum Error {
    Shape {
        op: &'static str,
        detail: String,
    },
    NonFinite {
        op: &'static str,
    },
    NotPsd {
        op: &'static str,
    },
    NonScalarSeed,
    EvenKernel {
        k: usize,
    },
    Domain(String),
    BlowUp {
        step: usize,
    },
    WeightDegeneracy {
        t: usize,
    },
    AtStep {
        t: usize,
        source: Box<Error>,
    },
    NonConvergence {
        iters: usize,
    },
    FilterDiverged {
        iter: usize,
        detail: String,
    },
    Config(String),
    DataFormat(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Self::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Self::NotPsd { op } => write!(f, "matrix not positive semidefinite in {op}"),
            Self::NonScalarSeed => write!(f, "backward seed must be a 1x1 scalar node"),
            Self::EvenKernel { k } => write!(f, "circular convolution requires odd kernel size, got {k}"),
            Self::Domain(what) => write!(f, "{what}"),
            Self::BlowUp { step } => write!(f, "state blow-up during integration at step {step}"),
            Self::WeightDegeneracy { t } => write!(f, "particle weight degeneracy at time {t}"),
            Self::AtStep { t, source } => write!(f, "at time step {t}: {source}"),
            Self::NonConvergence { iters } => write!(f, "no convergence after {iters} iterations"),
            Self::FilterDiverged { iter, detail } => {
                write!(f, "filter divergence at training iteration {iter}: {detail}")
            }
            Self::Config(msg) => write!(f, "config error: {msg}"),
            Self::DataFormat(msg) => write!(f, "data format error: {msg}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::AtStep { source, .. } => Some(source),
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl Error {
    /// Wrap with the filter time index at which the error occurred.
    pub fn at_step(self, t: usize) -> Self {
        Self::AtStep {
            t,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
