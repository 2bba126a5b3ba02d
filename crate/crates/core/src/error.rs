use thiserror::Error;

/// Errors surfaced by the model, estimators and solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("covariance is not positive definite after {attempts} jitter attempts")]
    CovarianceDegenerate { attempts: usize },

    #[error("numerical degeneracy: {0}")]
    Numerical(String),

    #[error("capacity estimation failed: {0}")]
    Estimation(String),

    #[error("degradation is infeasible: {0}")]
    InfeasibleDegradation(String),

    #[error("window solver failed: {0}")]
    Solver(String),

    #[error("fitting error: {0}")]
    Fitting(String),

    #[error("data error at row {row}: {msg}")]
    Data { row: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// True for errors caused by bad configuration or parameter packs rather than data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Argument(_) | Error::Json(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
