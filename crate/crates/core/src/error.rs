use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward root does not depend on any tensor that requires grad")]
    Detached,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown token {token:?}; valid vocabulary: {valid}")]
    UnknownToken { token: String, valid: String },

    #[error("unsatisfiable scene layout: {0}")]
    Layout(String),

    #[error("timestep {t} out of range [0, {max})")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("timesteps must decrease along the reverse chain (got {t} -> {t_prev})")]
    NonMonotoneTimesteps { t: usize, t_prev: usize },

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("optimization produced a non-finite loss at step {step}; trace so far: {trace:?}")]
    OptimizationNaN { step: usize, trace: Vec<f64> },

    #[error("prompt has {count} tokens, maximum is {max}")]
    PromptOverflow { count: usize, max: usize },

    #[error("region mask for {0:?} is empty at attention resolution")]
    ZeroMaskNorm(String),

    #[error("attention recording was not enabled for this run")]
    RecordingAbsent,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
