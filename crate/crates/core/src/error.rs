use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("symbol index {index} out of range for p = {p}")]
    IndexOutOfRange { index: usize, p: usize },

    #[error("invalid training fraction: {0}")]
    InvalidFraction(String),

    #[error("training fraction {0} leaves the training set empty")]
    EmptyTrainSet(String),

    #[error("task has no permissible parallelograms (|P0| = 0)")]
    DegenerateTask,

    #[error("unsupported: {0}")]
    Unsupported(&'static str),

    #[error("representation has zero norm (Z0 = 0)")]
    ZeroNorm,

    #[error("embeddings have zero variance")]
    ZeroVariance,

    #[error("constraint system is unconstrained: nullity {nullity} > 2, third eigenvalue {lambda3:e}")]
    Unconstrained { nullity: usize, lambda3: f64 },

    #[error("divergence at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numeric failures (divergence, non-finite values) as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::ZeroNorm | Error::ZeroVariance)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
