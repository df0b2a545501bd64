use thiserror::Error;

#[derive(Debug, Error)]
pub enum AcnnlError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    Singular { index: usize, pivot: f64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AcnnlError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(AcnnlError::Shape(msg.into()))
}

pub(crate) fn validation_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(AcnnlError::Validation(msg.into()))
}
