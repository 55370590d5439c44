use thiserror::Error;

#[derive(Debug, Error)]
pub enum SugarError {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("generator failed for actions: {0:?}")]
    PartialResult(Vec<String>),
    #[error("generator error: {0}")]
    Generator(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("vocab error: {0}")]
    Vocab(String),
    #[error(transparent)]
    Autodiff(#[from] sugar_autodiff::AutodiffError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SugarError>;
