use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (camera depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("window length mismatch: {rendered} rendered frames vs {truth} ground-truth frames (tau = {tau})")]
    WindowLengthMismatch {
        rendered: usize,
        truth: usize,
        tau: usize,
    },
    #[error("singular jacobian (condition number {condition:e})")]
    SingularJacobian { condition: f64 },
    #[error("innovation covariance is not invertible")]
    SingularInnovation,
    #[error("scene recipe produces no gaussians")]
    EmptyRecipe,
    #[error("non-finite loss: {detail}")]
    NonFiniteLoss {
        detail: String,
        gaussian: Option<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(what: impl Into<String>) -> Self {
        Error::ShapeMismatch(what.into())
    }
}
