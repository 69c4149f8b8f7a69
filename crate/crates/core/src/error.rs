use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    DataLine { path: PathBuf, line: usize, msg: String },

    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Diverged { epoch: usize, batch: usize, msg: String },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Shape { .. } => 1,
            Error::Data(_)
            | Error::DataLine { .. }
            | Error::Lookup(_)
            | Error::UndefinedMetric(_)
            | Error::Io { .. }
            | Error::Json(_) => 2,
            Error::NonFinite(_) | Error::Diverged { .. } => 3,
        }
    }
}
