use thiserror::Error;

pub type Result<T> = std::result::Result<T, DrfError>;

#[derive(Debug, Error)]
pub enum DrfError {
    #[error("dimension error in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {value}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },

    #[error("training diverged at epoch {epoch}: loss {loss} exceeds 10x initial {initial}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("causality violation: {0}")]
    Causality(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DrfError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DrfError::InvalidArgument(msg.into())
    }
}
