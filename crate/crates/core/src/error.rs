//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs violate a precondition (non-finite values, bad ranges).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A 3x3 block cannot be projected onto a rotation (rank-deficient).
    #[error("degenerate rotation: {0}")]
    DegenerateRotation(String),

    /// Configuration values are inconsistent or out of range.
    #[error("config error: {0}")]
    Config(String),

    /// A time step index fell outside `[1, T]`.
    #[error("time step {t} out of range [1, {t_max}]")]
    StepOutOfRange { t: usize, t_max: usize },

    /// Array dimensions do not match the expected shape.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// Reverse diffusion produced non-finite values.
    #[error("sampler diverged at step {step}")]
    SamplerDiverged { step: usize },

    /// The denoiser produced non-finite activations.
    #[error("denoiser diverged: {0}")]
    DenoiserDiverged(String),

    /// Training loss became non-finite.
    #[error("non-finite loss at step {step} (sample ids {sample_ids:?})")]
    NonFiniteLoss { step: u64, sample_ids: Vec<String> },

    /// Point configuration too degenerate for alignment.
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    /// Dataset files are missing, corrupt, or of the wrong version.
    #[error("data error at {path}: {reason}")]
    Data { path: String, reason: String },

    /// Checkpoint refused (hash/version/width mismatch) or unreadable.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn data(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by numerical divergence rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::SamplerDiverged { .. }
                | Error::DenoiserDiverged(_)
                | Error::NonFiniteLoss { .. }
                | Error::DegenerateRotation(_)
                | Error::DegenerateConfiguration(_)
        )
    }
}
