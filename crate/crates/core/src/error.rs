use thiserror::Error;

use crate::estimator::FitResult;
use crate::lorentz::HyperPoint;

pub type Result<T> = std::result::Result<T, HwnError>;

#[derive(Debug, Error)]
pub enum HwnError {
    /// Malformed input: dimension mismatch, non-tangent vector, bad length.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A value outside the domain of the operation (e.g. a non-PD matrix).
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite intermediate values or an iterative routine that failed.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("Frechet mean did not converge after {iters} iterations")]
    FrechetNonConvergence { iters: usize, last: Box<HyperPoint> },

    #[error("no start converged (best objective {:.6e})", .best.objective)]
    FitFailed { best: Box<FitResult> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HwnError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        HwnError::Argument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        HwnError::Numeric(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        HwnError::Domain(msg.into())
    }

    /// True for failures of the numerical machinery, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            HwnError::Numeric(_)
                | HwnError::Domain(_)
                | HwnError::FrechetNonConvergence { .. }
                | HwnError::FitFailed { .. }
        )
    }
}
