use thiserror::Error;

/// Errors raised anywhere in the clustering pipeline.
#[derive(Debug, Error)]
pub enum NccError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("batch normalization needs at least 2 rows in training mode, got {0}")]
    BatchSize(usize),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value encountered: {0}")]
    Numeric(String),
    #[error("in-batch negatives need at least 2 rows, got {0}")]
    NeedsNegatives(usize),
    #[error("loss undefined: every cluster in the mini-batch is empty")]
    UndefinedLoss,
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (align {loss_align}, pcl {loss_pcl})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss_align: f64,
        loss_pcl: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NccError>;
