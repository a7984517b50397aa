use thiserror::Error;

use crate::autodiff::DiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("conditioning failed: {0}")]
    Conditioning(String),
    #[error("flow layer {layer} ({kind}): input {value} outside domain")]
    Domain { layer: usize, kind: &'static str, value: f64 },
    #[error("flow layer {layer} ({kind}): inversion did not converge, residual {residual:e}")]
    Inversion { layer: usize, kind: &'static str, residual: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("channel {0} has zero standard deviation")]
    DegenerateChannel(usize),
    #[error("epoch {epoch}: numeric failure in {term}: {source}")]
    Training { epoch: usize, term: String, source: Box<Error> },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("filter diverged at step {0}: covariance lost positive definiteness")]
    FilterDivergence(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
