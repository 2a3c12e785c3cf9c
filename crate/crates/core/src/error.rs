//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/layer shape violation; `detail` names the offending dimension.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Argument outside its documented domain (p ≥ 1, s ≤ 0, odd pool input, ...).
    #[error("invalid argument in {op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    /// Autodiff graph misuse (non-scalar backward root, double backward, ...).
    #[error("graph error: {0}")]
    Graph(String),

    /// Malformed file content (bad magic, truncation, version skew).
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Bad configuration value or unknown config key.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArg { op, detail: detail.into() }
    }

    pub fn format(path: impl AsRef<std::path::Path>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.as_ref().display().to_string(), detail: detail.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
