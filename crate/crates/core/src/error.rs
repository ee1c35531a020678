use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the fitting, simulation and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate response: outcome is constant, lambda_max = 0")]
    DegenerateResponse,

    #[error("coordinate descent did not converge after {sweeps} sweeps (max change {max_change:e})")]
    NonConvergence {
        sweeps: usize,
        max_change: f64,
        /// Last iterate on the original covariate scale.
        beta: Vec<f64>,
        intercept: f64,
    },

    #[error("singular design: {0}")]
    Singular(String),

    #[error("covariance not PD")]
    NotPositiveDefinite,

    #[error("positivity violated: propensity {0} is not inside (0, 1)")]
    Positivity(f64),

    #[error("empty arm: no rows with treatment {arm:+} in {context}")]
    EmptyArm { arm: i8, context: String },

    #[error("arm too small to stratify: arm {arm:+} has {count} rows for {folds} folds")]
    ArmTooSmall { arm: i8, count: usize, folds: usize },

    #[error("parse error in {path} at row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical machinery (as opposed to bad data).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::Singular(_) | Error::NotPositiveDefinite
        )
    }
}
