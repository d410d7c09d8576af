use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {msg}")]
    Config { field: &'static str, msg: String },

    #[error("parse error, line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("{field} out of range, line {line}")]
    Validation { field: &'static str, line: u64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("training diverged at epoch {epoch} (lr = {lr})")]
    Divergence { epoch: usize, lr: f64 },

    #[error("degenerate denominator: {0}")]
    Degenerate(String),

    #[error("measurement error: {0}")]
    Measurement(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config(field: &'static str, msg: impl Into<String>) -> Error {
    Error::Config {
        field,
        msg: msg.into(),
    }
}
