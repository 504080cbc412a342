use evit_tensor::io::IoError;
use evit_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("model structure: {0}")]
    Structure(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("state: {0}")]
    State(String),
    #[error("contract violation: {0}")]
    Contract(String),
}
