use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("segmentation error: {0}")]
    Segmentation(String),

    #[error("sequence of {len} positions exceeds capacity {max}")]
    Capacity { len: usize, max: usize },

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
