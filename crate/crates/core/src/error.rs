use std::io;

use thiserror::Error;

/// Errors produced by the analysis engine.
#[derive(Debug, Error)]
pub enum Error {
    /// An input tensor or argument does not satisfy an operation's contract.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A named parameter is out of its allowed range.
    #[error("invalid value for `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    /// A model description whose layer shapes do not compose.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// Malformed or truncated file contents.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    TrainingDiverged { epoch: usize, batch: usize },

    /// A class band needs at least two member images.
    #[error("class {class} has {count} {role} member(s); at least 2 are required")]
    InsufficientMembers {
        class: usize,
        role: &'static str,
        count: usize,
    },

    #[error("{what} {id} not found")]
    NotFound { what: &'static str, id: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid_param(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field,
        reason: reason.into(),
    }
}
