//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("agent {agent} action component {component} = {value} outside [{lo}, {hi}]")]
    ActionOutOfRange {
        agent: usize,
        component: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("batch moments need at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("non-finite value in {0}; training diverged")]
    NonFinite(String),

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
