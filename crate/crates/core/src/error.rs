use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument falls outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A prediction too close to the origin to carry an angle.
    #[error("degenerate point ({x:e}, {y:e}) has no meaningful angle")]
    DegeneratePoint { x: f64, y: f64 },

    /// The requested number of distinct samples cannot be produced.
    #[error("exhausted: {0}")]
    Exhausted(String),

    /// An API was called out of order (for example backward without a forward trace).
    #[error("usage error: {0}")]
    Usage(String),

    /// A configuration failed validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Loss or parameters became NaN/Inf during training.
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    /// A persisted file failed its integrity check or could not be parsed.
    #[error("corrupt file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
