use std::path::PathBuf;

use thiserror::Error;

use crate::training::checkpoint::CheckpointError;

/// Errors produced anywhere in the denoising pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("{op}: spatial size {height}x{width} is not divisible by {multiple}; pad the input with pad_to_even first")]
    Divisibility {
        op: &'static str,
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("batch norm `{0}` has no running statistics; load a checkpoint or train first")]
    MissingRunningStats(String),

    #[error("batch norm in train mode needs at least 2 values per channel, got {0}")]
    TooFewBatchValues(usize),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`; optimizer step aborted")]
    NonFiniteGradient(String),

    #[error("training halted: non-finite loss at epoch {epoch}, batch {batch} (lr {lr:e})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },

    #[error("{0}")]
    Input(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
