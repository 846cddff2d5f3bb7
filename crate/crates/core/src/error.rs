use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("freeze plan error: {0}")]
    Plan(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("loss has no weighted tokens")]
    EmptyLoss,
    #[error("empty batch")]
    EmptyBatch,
    #[error("sample {id} has {len} tokens, exceeding capacity {capacity}")]
    Oversize { id: usize, len: usize, capacity: usize },
    #[error("rank {0} has no assigned samples")]
    EmptyRank(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
