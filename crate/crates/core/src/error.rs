use thiserror::Error;

use crate::tensor::TensorError;
use crate::toytrain::LossTrace;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("invalid selection policy: {0}")]
    Policy(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("query {query} attends to no keys")]
    EmptyAttention { query: usize },
    #[error("invalid training config: {0}")]
    TrainConfig(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize, trace: Box<LossTrace> },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
