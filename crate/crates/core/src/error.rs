use g2d_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{op}: {reason}")]
    InvalidInput { op: &'static str, reason: String },

    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),

    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),

    #[error("non-finite {term} at step {step} (max |grad| = {max_grad:e})")]
    NonFiniteLoss { step: u64, term: String, max_grad: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn input(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidInput {
            op,
            reason: reason.into(),
        }
    }
}
