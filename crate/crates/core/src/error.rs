use std::path::PathBuf;

/// Errors produced by the diffusion fine-tuning toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range {min}..={max}")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("unknown distribution kind `{0}`")]
    UnknownDistribution(String),

    #[error("degenerate distribution parameters: {0}")]
    DegenerateParams(String),

    #[error("empty support set")]
    EmptySupport,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown condition index {index} (model has {classes} classes)")]
    UnknownCondition { index: usize, classes: usize },

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite gradient at coordinate {index}")]
    NonFiniteGradient { index: usize },

    #[error("non-finite sampler state at step {step} (t = {t})")]
    NonFiniteSamplerState { step: usize, t: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty categorical distribution for {0}: all timestep masses are zero")]
    EmptyCategorical(&'static str),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
