use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("incompatible model structure: {0}")]
    Structure(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("training failed: {0}")]
    Training(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("topic error: {0}")]
    Topic(String),

    #[error("acl error: {0}")]
    Acl(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
