//! Crate-wide error type. Contract violations inside numeric kernels (shape
//! mismatches, log of a non-positive value) panic with a message naming the
//! offending operation; recoverable conditions (bad input data, file formats,
//! training aborts) surface through [`Error`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("episode sampling failed: class {class} has {available} labeled nodes, needs at least {required}")]
    ClassTooSmall {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("training aborted at step {step}: {reason}")]
    TrainAbort { step: usize, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: format error at byte {offset}: {reason}")]
    Format {
        path: String,
        offset: u64,
        reason: String,
    },

    #[error("{path}: unsupported container version {found} (this build reads version {expected})")]
    UnsupportedVersion {
        path: String,
        found: u32,
        expected: u32,
    },

    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
