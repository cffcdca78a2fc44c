use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report. The CLI maps these onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("bottleneck capacity k={k} exceeds available positions {available}")]
    Capacity { k: usize, available: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("truncated file {path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value in {what} (index {index})")]
    NonFinite { what: String, index: usize },

    #[error("training diverged at step {step}: loss is {loss}; last good checkpoint: {last_checkpoint}")]
    Diverged {
        step: u64,
        loss: f64,
        last_checkpoint: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Param(_) | Error::Capacity { .. } => 2,
            Error::Format { .. } | Error::Truncated { .. } | Error::Data(_) | Error::Io { .. } => 3,
            Error::Shape { .. } => 3,
            Error::NonFinite { .. } | Error::Diverged { .. } => 4,
        }
    }
}
