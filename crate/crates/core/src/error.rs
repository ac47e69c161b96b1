use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the cascade.
#[derive(Debug, Error)]
pub enum Error {
    /// Data that violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A network, plan, or layer configuration that cannot be realised.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// An operation called on an object in the wrong state.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Training loss became non-finite or exploded.
    #[error("training diverged at iteration {iteration} (stage {stage}): loss = {loss}")]
    Diverged { iteration: usize, stage: String, loss: f64 },

    /// A pipeline stage failed; `stage` names it.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("failed to parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn invalid_config(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

pub(crate) fn invalid_state(msg: impl Into<String>) -> Error {
    Error::InvalidState(msg.into())
}
