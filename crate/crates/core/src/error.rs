use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

impl LabError {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_)
            | LabError::Shape(_)
            | LabError::Index(_)
            | LabError::Usage(_)
            | LabError::Parse(_) => 2,
            LabError::Numeric(_) | LabError::Degenerate(_) => 3,
            LabError::Io(_) => 4,
        }
    }
}

impl From<csv::Error> for LabError {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => LabError::Io(io),
            other => LabError::Parse(format!("{other:?}")),
        }
    }
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            LabError::Io(e.into())
        } else {
            LabError::Parse(e.to_string())
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
