use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes surfaced by the library. The CLI maps each variant onto
/// an exit code (config: 2, numeric: 3, data/parse: 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite_epoch:?})")]
    Diverged {
        epoch: usize,
        last_finite_epoch: Option<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch composition error: class {class} has {count} sample(s), at least 2 are required")]
    BatchComposition { class: usize, count: usize },

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension { .. } | Error::BatchComposition { .. } => 2,
            Error::Numeric(_) | Error::Diverged { .. } => 3,
            Error::Parse { .. } | Error::Data(_) | Error::Io { .. } => 4,
        }
    }
}
