use thiserror::Error;

/// Errors raised across the planner. Variants map onto CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("id {id} out of range (size {size})")]
    Range { id: usize, size: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("input of length {len} exceeds max context {max}")]
    Context { len: usize, max: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("vocabulary collision: {0}")]
    Collision(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
