use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("line {line}: {message}")]
    Row { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("conversation `{conversation_id}` is not chronologically ordered at record {index}")]
    Ordering {
        conversation_id: String,
        index: usize,
    },

    #[error("annotation row {row}: components sum to {sum}, outside the simplex tolerance")]
    Simplex { row: usize, sum: f64 },

    #[error("annotation count mismatch: {records} records but {annotations} annotations")]
    CountMismatch { records: usize, annotations: usize },

    #[error("endpoint batch {batch}: {message}")]
    Endpoint { batch: usize, message: String },

    #[error("state became non-finite at t = {t}")]
    NumericBlowup { t: f64 },

    #[error("solver exceeded {max_steps} steps before reaching t = {t_end}")]
    NonConvergence { max_steps: usize, t_end: f64 },

    #[error("step size fell to the minimum {h_min} at t = {t} with error norm {err}")]
    Stiffness { t: f64, h_min: f64, err: f64 },

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(&'static str),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericBlowup { .. }
                | Error::NonConvergence { .. }
                | Error::Stiffness { .. }
                | Error::NonFiniteGradient(_)
                | Error::Divergence { .. }
        )
    }
}
