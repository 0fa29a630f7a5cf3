use core::fmt;

/// Errors raised by the sampling core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Cholesky factorization failed even at the largest jitter of the schedule.
    NotPositiveDefinite {
        dim: usize,
    },
    /// A matrix passed as positive semi-definite has a clearly negative eigenvalue.
    NotPsd {
        min_eigenvalue: f64,
    },
    /// Every log-weight was `-inf`.
    AllWeightsZero,
    /// The target has no gradient (uniform or triangular densities).
    NoGradient,
    DimensionMismatch {
        expected: usize,
        found: usize,
    },
    /// The dynamics cannot be Metropolized with the requested kernel mode.
    UnsupportedMode(&'static str),
    /// Autocorrelation requested for a constant series.
    ZeroVariance,
    /// The transition matrix has more than one closed communicating class.
    Reducible {
        closed_classes: usize,
    },
    InvalidArgument(&'static str),
    /// An iterative solver stopped before reaching its tolerance.
    NoConvergence {
        residual: f64,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NotPositiveDefinite { dim } => {
                write!(
                    f,
                    "{dim}x{dim} matrix is not positive definite at maximum jitter"
                )
            }
            Error::NotPsd { min_eigenvalue } => {
                write!(
                    f,
                    "matrix is not positive semi-definite (eigenvalue {min_eigenvalue:e})"
                )
            }
            Error::AllWeightsZero => f.write_str("all weights are zero"),
            Error::NoGradient => f.write_str("target has no gradient"),
            Error::DimensionMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            Error::UnsupportedMode(msg) => write!(f, "unsupported kernel mode: {msg}"),
            Error::ZeroVariance => f.write_str("series has zero variance"),
            Error::Reducible { closed_classes } => {
                write!(f, "chain is reducible ({closed_classes} closed classes)")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NoConvergence { residual } => {
                write!(
                    f,
                    "iterative solver did not converge (residual {residual:e})"
                )
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
