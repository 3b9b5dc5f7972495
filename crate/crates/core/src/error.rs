use thiserror::Error;

pub type Result<T> = std::result::Result<T, KanError>;

#[derive(Debug, Error)]
pub enum KanError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A trace or gradient set does not belong to the network it is used with.
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("ingestion error at row {row}, column {column}: {message}")]
    Ingestion {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("preprocessing error: {0}")]
    Preprocess(String),

    #[error("training diverged at iteration {iteration}: non-finite loss")]
    Diverged { iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl KanError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        KanError::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        KanError::Config(msg.into())
    }
}
