#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] fedplat_core::Error),
    #[error(transparent)]
    Runtime(#[from] fedplat_runtime::Error),
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    /// Step budgets differ between scenarios.
    #[error("unfair comparison: {0}")]
    Fairness(String),
    /// The broker saw different traffic than the protocol prescribes.
    #[error("message audit failed: {0}")]
    Audit(String),
    #[error("federated run {id} ended as {status}")]
    Federated { id: String, status: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;
