use std::path::PathBuf;

use dmm_core::DmmError;
use dmm_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("required file {} does not exist", .0.display())]
    Missing(PathBuf),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    /// 0 success, 1 configuration or prerequisite, 2 I/O, 3 numerical.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Missing(_) => 1,
            Self::Io(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}

impl From<DmmError> for CliError {
    fn from(e: DmmError) -> Self {
        let msg = e.to_string();
        match e {
            DmmError::Io { .. } | DmmError::Format { .. } => Self::Io(msg),
            DmmError::NonFiniteLoss { .. }
            | DmmError::NonConvergence { .. }
            | DmmError::Tensor(TensorError::NonFinite { .. }) => Self::Numeric(msg),
            _ => Self::Config(msg),
        }
    }
}
