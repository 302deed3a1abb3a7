use thiserror::Error;

use crate::autodiff::AdError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("numerical failure in {op}: {detail}")]
    Numerical { op: &'static str, detail: String },
    #[error("metric is not positive definite at the requested point ({context})")]
    SingularMetric { context: &'static str },
    #[error("point is off the chart surface: residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    OffManifold { residual: f64, tol: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("complex too large: {0}")]
    TooLarge(String),
    #[error("no chart survives the responsibility threshold {threshold}")]
    NoActiveChart { threshold: f64 },
    #[error("hard-switch integration thrashed after {switches} chart switches")]
    Thrashing { switches: usize },
    #[error("ambient integration diverged at t={t:.4}: |x|={norm:.3e}")]
    Diverged { t: f64, norm: f64 },
    #[error("{0} is not available for this manifold")]
    Unsupported(&'static str),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<AdError> for Error {
    fn from(e: AdError) -> Self {
        match e {
            AdError::NonFinite { op, index } => Error::Numerical {
                op,
                detail: format!("non-finite output {index}"),
            },
            AdError::Dimension { op, expected, got } => Error::Dimension { op, expected, got },
        }
    }
}

impl Error {
    pub(crate) fn numerical(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numerical {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. }
                | Error::SingularMetric { .. }
                | Error::Thrashing { .. }
                | Error::Diverged { .. }
                | Error::NoActiveChart { .. }
        )
    }
}
