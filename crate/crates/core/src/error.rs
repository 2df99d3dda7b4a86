use std::path::PathBuf;

use crate::model::TaskId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("duplicate trial entry for participant {participant}, condition {condition}, task {task}")]
    DuplicateTrial {
        participant: String,
        condition: String,
        task: String,
    },

    #[error("invalid series {context}: {message}")]
    Series { context: String, message: String },

    #[error("channel mismatch in {context}: expected {expected:?}, found {found:?}")]
    Channels {
        context: String,
        expected: Vec<String>,
        found: Vec<String>,
    },

    #[error("task {0:?} is not a force task and is excluded from force analysis")]
    ExcludedTask(TaskId),

    #[error("task {0:?} is not a single-axis task")]
    NotSingleAxis(TaskId),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty window: no samples in [{start}, {end}]")]
    EmptyWindow { start: f64, end: f64 },

    #[error("no aligned sample pairs within {threshold} s")]
    NoAlignment { threshold: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("missing {what} for {key}")]
    Missing { what: String, key: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn series(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Series {
            context: context.into(),
            message: message.into(),
        }
    }
}
