use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss term `{term}` at step {step}")]
    NonFinite { term: &'static str, step: u64 },

    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("image {}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("I/O on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint checksum mismatch (file truncated or corrupted)")]
    Checksum,

    #[error("not a checkpoint file")]
    BadMagic,

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(
        "config digest mismatch: checkpoint records {stored}, expected {expected}; \
         the checkpoint was produced under a different configuration"
    )]
    Digest { stored: String, expected: String },

    #[error("checkpoint element type {found} does not match requested {expected}")]
    Dtype { found: String, expected: &'static str },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
