//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: String },
    #[error("missing binding for input '{0}'")]
    MissingBinding(String),
    #[error("leaf '{0}' already defined with a different shape")]
    LeafRedefined(String),
    #[error("loss node is not scalar (shape {0:?})")]
    LossNotScalar(Vec<usize>),
    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("gradient check: {0}")]
    GradCheck(String),
    #[error("optimizer: {0}")]
    Optim(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (expected \"PHMT\")")]
    BadMagic,
    #[error("truncated tensor file")]
    Truncated,
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("tensor file: {0}")]
    TensorFile(String),

    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("train: {0}")]
    Train(String),
    #[error("eval: {0}")]
    Eval(String),
}

pub type Result<T> = std::result::Result<T, Error>;
