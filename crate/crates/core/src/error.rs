use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite loss at step {step}; offending batch seeds {seeds:?}")]
    NonFiniteLoss { step: usize, seeds: Vec<u64> },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Reasons a checkpoint fails to load. Nothing is applied when any of these occur.
#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("file is truncated")]
    Truncated,

    #[error("not a checkpoint (bad magic)")]
    BadMagic,

    #[error("checksum mismatch for tensor {0}")]
    ChecksumMismatch(String),

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("config: {0}")]
    Config(String),
}
