use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the enhancement pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch norm has no running statistics; run at least one training step first")]
    NoRunningStats,

    #[error("unknown {what} `{name}`")]
    Unknown { what: &'static str, name: String },

    #[error("signal error: {0}")]
    Signal(String),

    #[error("WAV format error in {path}: {detail}")]
    Wav { path: PathBuf, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint tensor `{name}` does not match the model: {detail}")]
    CheckpointMismatch { name: String, detail: String },

    #[error("training aborted at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
