use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown type {etype:?} in sample {sample_id:?} (not in label set {labelset:?})")]
    UnknownType {
        etype: String,
        sample_id: String,
        labelset: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("empty demonstration pool")]
    EmptyPool,

    #[error("backend error on completion ordinal {ordinal}: {message}")]
    Backend { ordinal: usize, message: String },

    #[error("embedding backend error: {0}")]
    Embedding(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Backend,
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::Backend { .. } | Error::Embedding(_) => ErrorClass::Backend,
            _ => ErrorClass::Data,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Backend => 3,
        }
    }
}
