use dmm_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DmmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid `{key}`: {reason}")]
    InvalidParameter { key: &'static str, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: u64, diagnostics: String },
    #[error("no ground truth for eta = {0}")]
    MissingGroundTruth(f64),
    #[error("flow history holds {have} fields, {need} required")]
    InsufficientHistory { have: usize, need: usize },
    #[error("supervisor did not converge: validation accuracy {accuracy:.3} < {required:.3}")]
    NonConvergence { accuracy: f64, required: f64 },
    #[error("parameter `{0}` is missing from the checkpoint")]
    MissingParameter(String),
}

pub type Result<T> = std::result::Result<T, DmmError>;

pub(crate) fn invalid(key: &'static str, reason: impl Into<String>) -> DmmError {
    DmmError::InvalidParameter {
        key,
        reason: reason.into(),
    }
}

pub(crate) fn io_error(path: &std::path::Path, source: std::io::Error) -> DmmError {
    DmmError::Io {
        path: path.display().to_string(),
        source,
    }
}
