use thiserror::Error;

pub type Result<T> = std::result::Result<T, HgfeError>;

#[derive(Debug, Error)]
pub enum HgfeError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A spatial dimension is not a multiple of the window size.
    #[error("partition error: {dim}={size} is not divisible by window size w={window}")]
    Partition {
        dim: &'static str,
        size: usize,
        window: usize,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HgfeError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        HgfeError::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        HgfeError::Contract(msg.into())
    }
}
