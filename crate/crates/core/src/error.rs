use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MoproError>;

#[derive(Debug, Error)]
pub enum MoproError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid config `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("initialization failed: {0}")]
    Init(String),

    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MoproError {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        MoproError::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MoproError::File {
            path: path.into(),
            source,
        }
    }
}
