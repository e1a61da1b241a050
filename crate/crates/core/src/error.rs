use std::io;

use thiserror::Error;

/// Errors surfaced by the library. Variants map onto CLI exit codes:
/// configuration problems exit 1, everything else exits 2.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid shapes, specs or configs.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed dataset contents.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed file contents (checkpoints, JSON, manifests).
    #[error("format error: {0}")]
    Format(String),

    /// Non-finite values during training.
    #[error("numerical failure at step {step}: {component} = {value}")]
    Numerical { step: usize, component: String, value: f64 },

    /// An internal invariant broke; always a bug.
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
