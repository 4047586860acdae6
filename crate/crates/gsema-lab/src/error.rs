//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration supplied by the caller (bad shapes, missing
    /// directories, out-of-range parameters).
    #[error("configuration error: {0}")]
    Config(String),

    /// Two grids or vectors that must agree in shape/length do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An operation received an input it is mathematically undefined on
    /// (zero-norm vector, empty pair set, single-domain feature dump).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A loss or parameter became NaN/Inf during training.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// Violated internal invariant; indicates a bug, not a usage error.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config file error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
