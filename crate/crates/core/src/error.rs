use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: schema error: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("schema error: {0}")]
    SchemaViolation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("budget exhausted: {0}")]
    Budget(#[from] BudgetExceeded),

    #[error("rollout budget exhausted after {completed} of {requested} rollouts")]
    PartialEstimate { completed: usize, requested: usize },

    #[error("inconsistent rollout oracle for trace {trace_id}: {reason}")]
    InconsistentOracle { trace_id: String, reason: String },

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("degenerate training set: {0}")]
    DegenerateDataset(String),

    #[error("problem {problem_id}: {message}")]
    Metrics { problem_id: String, message: String },

    /// Displays the inner error inline, so it is not also reported as a source.
    #[error("stage `{stage}` failed: {inner}")]
    Stage {
        stage: &'static str,
        inner: Box<Error>,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A ledger charge that would have crossed one of its caps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{counter} cap {cap} reached (used {used}, requested {requested})")]
pub struct BudgetExceeded {
    pub counter: &'static str,
    pub cap: u64,
    pub used: u64,
    pub requested: u64,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            inner: Box::new(self),
        }
    }
}
