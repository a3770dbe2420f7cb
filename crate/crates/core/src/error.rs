use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("entry cannot be decoded: {0}")]
    Decode(String),
    #[error("book is empty or has no usable entries")]
    EmptyBook,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("incompatible book: {0}")]
    Incompatible(String),
    #[error("invalid book file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
