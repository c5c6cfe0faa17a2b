use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("unsupported coupling pattern: {0}")]
    UnsupportedCoupling(String),

    #[error("prune: {0}")]
    Prune(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("verification protocol: {0}")]
    Protocol(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
