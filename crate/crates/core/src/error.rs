use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid map, scenario or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's preconditions (dimension mismatch,
    /// missing ground truth, mismatched sequence lengths, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Model fitting failed (GPR factorization, GMM collapse).
    #[error("fit error: {0}")]
    Fit(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("scenario generation failed: {0}")]
    Generator(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
