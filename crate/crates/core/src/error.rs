use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("missing background reference for sensor {0}")]
    MissingBackground(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("dangling reference in manifest: {0}")]
    DanglingReference(PathBuf),

    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code contract: 2 for validation errors, 3 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } => 3,
            _ => 2,
        }
    }
}
