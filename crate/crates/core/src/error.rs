//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by numerics, belief dynamics, environments and the harness.
#[derive(Debug, Error)]
pub enum DbosError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value at coordinate {coordinate} ({context})")]
    NonFinite {
        context: &'static str,
        coordinate: usize,
    },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("role {role} out of range (n_roles = {n_roles})")]
    RoleOutOfRange { role: usize, n_roles: usize },

    #[error("action {action} out of range (n_actions = {n_actions})")]
    ActionOutOfRange { action: usize, n_actions: usize },

    #[error("unknown parameter tensor `{0}`")]
    UnknownTensor(String),

    #[error("environment {env_id}: {message}")]
    Env { env_id: usize, message: String },

    #[error("step called on a terminated episode")]
    StepAfterTerminal,

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DbosError>;

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(DbosError::Dimension {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
