use thiserror::Error;

use crate::mle::FitResult;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Evaluation at a point where some organ-outcome probability is zero
    /// while the design assigns it positive weight.
    #[error("boundary: {0}")]
    Boundary(String),

    #[error("fit did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
        best: Box<FitResult>,
    },

    #[error("GEE alternating fit did not converge after {0} outer iterations")]
    GeeNonConvergence(usize),

    /// The null fit attained a higher log-likelihood than the full fit.
    #[error("null fit exceeds full fit log-likelihood by {0:.3e}")]
    NestingViolation(f64),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for numerical failures (fits, singular information), as opposed
    /// to malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Boundary(_)
                | Error::NonConvergence { .. }
                | Error::GeeNonConvergence(_)
                | Error::Singular(_)
                | Error::NestingViolation(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
