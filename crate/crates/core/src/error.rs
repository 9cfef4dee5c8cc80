use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("simulation produced a non-finite value at step {step}")]
    Simulation { step: usize },

    #[error("backward filter failed at node {node}: {reason}")]
    Filter { node: usize, reason: String },

    #[error("guided simulation produced a non-finite value at step {step}")]
    Guided { step: usize },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("optimization aborted at iteration {iter}: {reason}")]
    Fit { iter: usize, reason: String },

    #[error("pipeline stage `{stage}` failed: {reason}")]
    Pipeline { stage: String, reason: String },

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
