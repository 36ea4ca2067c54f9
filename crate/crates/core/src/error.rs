use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// An operation was called on an object that cannot support it
    /// (for example adding a head to a single-head network).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An internal invariant was broken; indicates a bug or corrupted state.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("config: missing required key '{key}'")]
    MissingKey { key: String },

    #[error("non-finite {term} during {context}")]
    NonFinite { term: &'static str, context: String },

    #[error("run failed for method {method}, seed {seed}: {source}")]
    Run {
        method: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by configuration rather than data or runtime failures.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::MissingKey { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
