//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("manifest row {row}: {msg}")]
    ManifestRow { row: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    /// Training aborted on a non-finite objective. Carries the diagnostic
    /// term values at the offending step.
    #[error("non-finite loss at step {step}: recon={recon} kl={kl} cls={cls} total={total}")]
    NonFiniteLoss {
        step: u64,
        recon: f64,
        kl: f64,
        cls: f64,
        total: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
