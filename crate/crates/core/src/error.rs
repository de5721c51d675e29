use thiserror::Error;

#[derive(Debug, Error)]
pub enum AliseError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("date error: {0}")]
    Date(String),
    #[error("normalization: channel {channel} has zero interquartile range")]
    ZeroIqr { channel: usize },
    #[error("loss diverged at step {step}: {value}")]
    Diverged { step: usize, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AliseError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(AliseError::Shape(msg.into()))
}
