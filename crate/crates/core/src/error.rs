use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("path not found: {0}")]
    NotFound(PathBuf),
    #[error("no decodable frames in {0}")]
    EmptyVideo(PathBuf),
    #[error("inconsistent frame sizes: {0}")]
    InconsistentFrames(String),
    #[error("invalid target side {0} (must be at least 8)")]
    InvalidTarget(usize),
    #[error("dataset has no video with at least two frames")]
    DatasetTooSmall,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("variance must be positive, got {0}")]
    InvalidVariance(f64),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("incompatible mode: {0}")]
    IncompatibleMode(String),
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed input: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable name of the error kind.
    pub fn category(&self) -> &'static str {
        match self {
            Error::NotFound(_) => "NotFound",
            Error::EmptyVideo(_) => "EmptyVideo",
            Error::InconsistentFrames(_) => "InconsistentFrames",
            Error::InvalidTarget(_) => "InvalidTarget",
            Error::DatasetTooSmall => "DatasetTooSmall",
            Error::InvalidTemperature(_) => "InvalidTemperature",
            Error::InvalidVariance(_) => "InvalidVariance",
            Error::ConfigMismatch(_) => "ConfigMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::IncompatibleMode(_) => "IncompatibleMode",
            Error::Undefined(_) => "Undefined",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Parse(_) => "ParseError",
            Error::Io(_) => "IoError",
            Error::Image(_) => "ImageError",
            Error::Csv(_) => "CsvError",
        }
    }
}
