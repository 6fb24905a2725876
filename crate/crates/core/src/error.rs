use std::path::PathBuf;

/// Crate-wide error type. Variants map onto process exit codes: config,
/// data, format, arity and I/O problems exit 2; numeric failures exit 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("arity error: {0}")]
    Arity(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("undefined result: {0}")]
    Undefined(String),
    #[error("threshold check failed: {0}")]
    Threshold(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for config/data problems, 3 for
    /// numeric failures, 4 for failed threshold checks, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Data(_)
            | Error::Format(_)
            | Error::Arity(_)
            | Error::Shape(_)
            | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
            Error::Threshold(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
