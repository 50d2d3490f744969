use renorm_core::{AlgebraError, ConnectionError, KdnError, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scene spec: {0}")]
    Scene(String),
    #[error("could not place object {index}: no free position after {attempts} attempts and a full scan")]
    Placement { index: usize, attempts: usize },
    #[error("invalid detector config: {0}")]
    Detector(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("gradient decomposition needs the economical connection, got {0}")]
    Decomposition(String),
    #[error("config: {0}")]
    Config(String),
    #[error("file format: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Kdn(#[from] KdnError),
    #[error(transparent)]
    Connection(#[from] ConnectionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
