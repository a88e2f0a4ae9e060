use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint {field}: {reason}")]
    Checkpoint { field: &'static str, reason: String },

    #[error("unsupported checkpoint version {0} (expected 1)")]
    CheckpointVersion(u32),

    #[error("input error in {path}: {reason}")]
    Input { path: PathBuf, reason: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape {
            what,
            expected,
            got,
        })
    }
}
