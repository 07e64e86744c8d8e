use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid hierarchy at node '{node}': {reason}")]
    Validation { node: String, reason: String },

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("embedding provider '{provider}': {reason}")]
    Provider { provider: String, reason: String },

    #[error("unknown {kind} '{name}' (registered: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("metric: {0}")]
    Metric(String),

    #[error("data: {0}")]
    Data(String),

    #[error("training diverged at epoch {epoch} (last good checkpoint: {last_good:?})")]
    Diverged {
        epoch: usize,
        last_good: Option<PathBuf>,
    },

    #[error("non-deterministic objective: two evaluations differ ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Yaml(#[from] serde_yaml::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by malformed user input (hierarchy files,
    /// label vectors, configs) rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse(_)
                | Error::Validation { .. }
                | Error::Yaml(_)
                | Error::UnknownStrategy { .. }
        )
    }
}
