use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing input file {}: expected {}", path.display(), expected.join(", "))]
    Ingest { path: PathBuf, expected: Vec<&'static str> },

    #[error("format error in {file}: {detail}")]
    Format { file: String, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("episode error: {0}")]
    Episode(String),

    #[error("generator spec error: {0}")]
    Spec(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
