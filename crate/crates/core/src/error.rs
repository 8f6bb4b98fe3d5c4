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

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input at byte offset {offset}: {what}")]
    Truncated { offset: u64, what: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown feature key `{0}`")]
    UnknownKey(String),

    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("vocabulary of size {requested} unreachable: corpus supports at most {reachable} entries")]
    VocabExhausted { requested: usize, reachable: usize },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("refusing to overwrite existing output {0} (pass --overwrite)")]
    AlreadyExists(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from caller-supplied configuration rather than from data.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidArgument(_) | Error::AlreadyExists(_)
        )
    }
}
