use thiserror::Error;

/// Errors raised by the estimators and their numerical kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("matrix does not have full column rank")]
    RankDeficient,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("state dimension {0} is too small for this model")]
    DimensionTooSmall(usize),
    #[error("state contains NaN or infinite values")]
    NonFiniteState,
    #[error("innovation covariance is singular")]
    SingularInnovationCov,
    #[error("cost function Hessian is singular")]
    SingularHessian,
    #[error("conjugate gradient stalled at relative residual {residual:e} after {iterations} iterations")]
    CgStalled { iterations: usize, residual: f64 },
    #[error("no convergence after {0} iterations")]
    MaxIterationsExceeded(usize),
    #[error("invalid shift {shift} for lag {lag}")]
    InvalidShift { shift: usize, lag: usize },
    #[error("invalid inflation factor {0}; factors below 1 are not supported")]
    InvalidFactor(f64),
    #[error("lagged ensemble store does not cover the data assimilation window")]
    WindowUnderflow,
    #[error("ensemble needs at least 2 members, found {0}")]
    EnsembleTooSmall(usize),
    #[error("operation requires a linear observation operator")]
    NonlinearObservation,
    #[error("filter divergence at cycle {cycle}: analysis RMSE {rmse} exceeds threshold {threshold}")]
    FilterDivergence { cycle: usize, rmse: f64, threshold: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
