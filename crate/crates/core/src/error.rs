use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: &'static str, shape: Vec<usize> },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already ran on this tape")]
    TapeConsumed,
    #[error("tensor format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum AlgebraError {
    #[error("empty feature cascade")]
    EmptyCascade,
    #[error("target level {target} out of range for {levels} levels")]
    TargetLevel { target: usize, levels: usize },
    #[error("strides must strictly increase: {0:?}")]
    Strides(Vec<usize>),
    #[error("expected {expected} entries, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("singular linear system")]
    Singular,
    #[error("channel mismatch across levels: {0:?}")]
    Channels(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum KdnError {
    #[error("stride must be at least 1")]
    Stride,
    #[error("object box {0:?} lies outside the feature map")]
    OutsideMap([f64; 4]),
    #[error("empty region")]
    EmptyRegion,
    #[error("finalize called on an empty factor stack")]
    EmptyStack,
    #[error("factor arity {got} does not match stack arity {expected}")]
    Arity { expected: usize, got: usize },
    #[error("no relevant level (all factors below 1): {0:?}")]
    NoRelevantLevel(Vec<f64>),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum ConnectionError {
    #[error("invalid connection spec: {0}")]
    Spec(String),
    #[error("expected {expected} pyramid levels, got {got}")]
    Levels { expected: usize, got: usize },
    #[error("pyramid channel counts differ ({0:?}); enable the projection add-on")]
    Channels(Vec<usize>),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
