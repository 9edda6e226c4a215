use thiserror::Error;

/// Library-wide error type. The CLI maps each variant to a stable
/// machine-parsable class name on stderr.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain: {0}")]
    Domain(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable single-word class used in CLI error lines.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite(_) => "numeric",
            Error::Io(_) => "io",
            Error::Image(_) => "io",
            Error::Json(_) => "config",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
