use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape4;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape4,
        rhs: Shape4,
    },

    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("backward was already run on this graph; rebuild it before differentiating again")]
    BackwardConsumed,

    #[error("backward root must be a scalar, got shape {0}")]
    NonScalarRoot(Shape4),

    #[error("group count {groups} does not divide channel count {channels}")]
    GroupMismatch { groups: usize, channels: usize },

    #[error("moments were computed with {moments} but the features were normalized with {features}")]
    SchemeMismatch { features: String, moments: String },

    #[error("target row {row} is not a probability distribution: {reason}")]
    InvalidTarget { row: usize, reason: String },

    #[error("{}: record {index}: {reason}", path.display())]
    Dataset {
        path: PathBuf,
        index: usize,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: Shape4, rhs: Shape4) -> Self {
        Error::ShapeMismatch { op, lhs, rhs }
    }
}
