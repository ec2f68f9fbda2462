//! Shared error type for the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (generation, solver, model or training).
    #[error("configuration: {0}")]
    Config(String),

    /// Malformed or out-of-contract input data.
    #[error("input: {0}")]
    Input(String),

    /// Numerically out-of-domain value (non-positive matrix entries, empty ground truth, ...).
    #[error("domain: {0}")]
    Domain(String),

    /// Operation defined only for specific point dimensions.
    #[error("unsupported dimension: {0}")]
    UnsupportedDim(String),

    /// Affinity matrix degenerate for the requested operation (e.g. all-zero matvec).
    #[error("degenerate affinity: {0}")]
    DegenerateAffinity(String),

    /// Corrupt or truncated checkpoint; `offset` is the byte position of the failure.
    #[error("checkpoint {path}: {msg} (at byte {offset})")]
    Checkpoint {
        path: String,
        offset: u64,
        msg: String,
    },

    /// Checkpoint written by an incompatible format version.
    #[error("checkpoint {path}: format version {found} not supported (expected {expected})")]
    CheckpointVersion {
        path: String,
        found: u32,
        expected: u32,
    },

    /// Training loop abort (non-finite loss or gradient).
    #[error("training aborted: {0}")]
    TrainAbort(String),

    /// Misuse of the autodiff tape (e.g. replaying adjoints twice).
    #[error("tape: {0}")]
    Tape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
