//! Error type for fallible, job-level operations.
//!
//! Shape errors inside the tensor engine are programming errors and
//! panic; everything a caller can plausibly recover from (bad inputs,
//! diverged optimization, failed training budget) comes back as
//! [`DncfError`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DncfError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("training failed: {0}")]
    TrainingFailed(String),
}

impl DncfError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        DncfError::InvalidInput(msg.into())
    }
}
