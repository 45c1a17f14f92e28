use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum TdgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate text feature at cell (category {category}, word {word})")]
    DegenerateFeature { category: usize, word: usize },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("word pool is empty after filtering")]
    EmptyPool,

    #[error("word pool is not valid UTF-8: {0}")]
    Encoding(#[from] std::string::FromUtf8Error),

    #[error("duplicate word in pool: {0:?}")]
    DuplicateWord(String),

    #[error("invalid benchmark spec: {0}")]
    Spec(String),

    #[error("cannot split domain: {0}")]
    Split(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value at step {step} in {param} (magnitude {magnitude})")]
    NonFinite {
        step: u64,
        param: String,
        magnitude: f64,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl TdgError {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            TdgError::Io(_) => 3,
            TdgError::NonFinite { .. }
            | TdgError::Numeric(_)
            | TdgError::Verification(_)
            | TdgError::DegenerateFeature { .. }
            | TdgError::DegenerateInput(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, TdgError>;
