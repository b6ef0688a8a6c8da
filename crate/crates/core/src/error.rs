use thiserror::Error;

/// Errors surfaced by every fallible operation in this crate.
///
/// Precondition violations are reported as `InvalidInput` or `DimMismatch`
/// rather than panics so that callers (CLI, pipelines) can attribute
/// failures to a stage and leave a failure marker instead of aborting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("png encode error: {0}")]
    PngEncode(#[from] png::EncodingError),

    #[error("png decode error: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn dim(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimMismatch {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
