//! Solver error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside stored range [{lo}, {hi}]")]
    OutOfTimeRange { t: f64, lo: f64, hi: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("{op} requires a periodic cube domain")]
    NeedsPeriodicDomain { op: &'static str },

    #[error("{op} requires a whole-space domain")]
    NeedsWholeSpace { op: &'static str },

    #[error("source has nonzero mean {mean:.3e}; periodic potential undefined")]
    NonzeroMean { mean: f64 },

    #[error("flow ensemble has no stored increments; rerun with store_increments")]
    MissingIncrements,

    #[error("gradient weight needs sigma > 0; got sigma = {sigma}")]
    ZeroNoiseGradient { sigma: f64 },

    #[error("{frac:.2}% of paths escaped the truncation box (limit {limit:.2}%)")]
    EscapedPaths { frac: f64, limit: f64 },

    #[error("inner pressure/gradient coupling did not reach {tol:.1e} in {iters} iterations (last delta {last:.3e})")]
    InnerNoConvergence { iters: usize, tol: f64, last: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
