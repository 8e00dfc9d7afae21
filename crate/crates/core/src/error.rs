use thiserror::Error;

/// Errors produced by the toolchain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed IDX stream: {0}")]
    Parse(String),
    #[error("inconsistent dataset: {0}")]
    Consistency(String),
    #[error("dataset size error: expected {expected} records, got {actual}")]
    Size { expected: usize, actual: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("out of domain: {0}")]
    Domain(String),
    #[error("training diverged for class {class} at epoch {epoch}: loss = {loss}")]
    Training {
        class: usize,
        epoch: usize,
        loss: f64,
    },
    #[error("cannot compile weights: {0}")]
    Compile(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("unsupported document: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
