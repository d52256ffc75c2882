use thiserror::Error;

pub type Result<T> = std::result::Result<T, SketchError>;

#[derive(Debug, Error)]
pub enum SketchError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("tree mechanism capacity of {capacity} updates exceeded")]
    CapacityExceeded { capacity: u64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SketchError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SketchError::InvalidParameter(msg.into())
    }
}
