use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("index {index} out of range for {op} with bound {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
