use thiserror::Error;

use crate::store::ContainerError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("trainable mask is empty")]
    EmptyMask,

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("id alignment failure: {0}")]
    Alignment(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged at every learning rate in the grid")]
    Diverged,

    #[error("task generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Container(#[from] ContainerError),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
