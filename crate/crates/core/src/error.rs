use thiserror::Error;

/// Errors raised anywhere in the reduction pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A Cholesky pivot was not strictly positive.
    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: &'static str },

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite input in {0}")]
    NonFiniteInput(&'static str),

    #[error("basis is rank deficient: rank {rank} < {cols} columns")]
    RankDeficientBasis { rank: usize, cols: usize },

    /// The full-data mutual information is zero, so relative errors are undefined.
    #[error("eigenvalue spectrum is empty (all values vanish)")]
    EmptySpectrum,

    #[error("retraction collapsed the basis rank")]
    RankCollapse,

    #[error("gradient evaluation produced non-finite values")]
    NonFiniteGradient,

    #[error("maximum number of iterations ({0}) exceeded")]
    MaxIterationsExceeded(usize),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("log-normal moments overflow (max diagonal {0:.1} > 700)")]
    MomentOverflow(f64),

    #[error("Chebyshev point {0} outside (-1, 1)")]
    PointOutOfRange(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::InvalidConfig(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
