use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate basis: column {column} has |R[i,i]| = {diag:e} (threshold {threshold:e})")]
    DegenerateBasis {
        column: usize,
        diag: f64,
        threshold: f64,
    },

    #[error("undefined: {0}")]
    Undefined(&'static str),

    #[error("stale subspace: frame carries version {frame}, local version is {local}")]
    StaleSubspace { frame: u32, local: u32 },

    #[error("numeric fault in layer {layer}: non-finite activation")]
    NumericFault { layer: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("peer disconnected: {0}")]
    Disconnected(String),

    #[error("invalid token id {id} (vocabulary size {vocab})")]
    InvalidToken { id: u32, vocab: usize },

    #[error("out of range: {0}")]
    Range(String),

    #[error("invalid config: {field}: {message}")]
    Config { field: String, message: String },

    #[error("stage {stage} failed: {message}")]
    StageFailure { stage: usize, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
