use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] keymask_core::Error),
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("unsupported checkpoint: {0}")]
    UnsupportedCheckpoint(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Core(e) => e.category(),
            Error::Tensor(_) => "TensorError",
            Error::UnsupportedCheckpoint(_) => "UnsupportedCheckpoint",
            Error::ConfigMismatch(_) => "ConfigMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::Io(_) => "IoError",
        }
    }
}
