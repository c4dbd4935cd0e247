use thiserror::Error;

pub type Result<T> = std::result::Result<T, KvError>;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("attention over an empty cache")]
    EmptyCache,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("scheduling error: {0}")]
    Scheduling(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed trace: {0}")]
    Trace(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl KvError {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        KvError::Dimension {
            context,
            expected,
            got,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            KvError::Config(_) | KvError::Parameter(_) => 2,
            KvError::Trace(_) => 3,
            _ => 1,
        }
    }
}
