use thiserror::Error;

/// Errors surfaced by every layer of the crate. The CLI maps variants to
/// exit codes: `Usage` -> 1, `Data`/`Shape`/`Io` -> 2, `Numeric` -> 3.
#[derive(Debug, Error)]
pub enum TcnError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("data: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TcnError>;

impl TcnError {
    pub fn exit_code(&self) -> i32 {
        match self {
            TcnError::Usage(_) => 1,
            TcnError::Data(_) | TcnError::Shape(_) | TcnError::Io(_) => 2,
            TcnError::Numeric(_) => 3,
        }
    }
}
