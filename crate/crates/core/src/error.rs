use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,

    #[error("class id {0} out of range")]
    InvalidLabel(usize),

    #[error("class mismatch: {0} vs {1}")]
    ClassMismatch(usize, usize),

    #[error("invalid prompt bank: {0}")]
    Bank(String),

    #[error("{0}")]
    Data(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
