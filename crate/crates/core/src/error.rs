use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input failed a precondition (bad probability table, bad config, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value or gradient became NaN or infinite.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Caller violated a protocol contract, e.g. fed a real-pair estimate
    /// into the generator objective.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("landmark detection failed: {0}")]
    Detection(String),

    /// Stored data did not match its checksum or was truncated.
    #[error("corrupted data in {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },

    /// Unknown magic or version tag.
    #[error("unsupported format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line tool: 1 for bad input, 2 for
    /// runtime and numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Domain(_) | Error::Shape(_) | Error::Contract(_) => 1,
            _ => 2,
        }
    }
}
