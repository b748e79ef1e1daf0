use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("unknown capture layer `{name}` (valid: {})", valid.join(", "))]
    UnknownCapture { name: String, valid: Vec<String> },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("input shape {got:?} does not match network input {expected:?}")]
    InputShape { expected: [usize; 3], got: Vec<usize> },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid training data: {0}")]
    InvalidData(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: corrupt file: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("{path}: unsupported format version {found} (this build reads up to {supported})")]
    Version { path: PathBuf, found: u32, supported: u32 },

    #[error("{path}: checksum mismatch")]
    Checksum { path: PathBuf },

    #[error("CAM is final-layer-only: head expects {head} channels, capture has {capture}")]
    CamChannels { head: usize, capture: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0}")]
    Domain(String),

    #[error("regional localizer budget exceeded: N*C = {cost} > {limit}; use the closed-form path or force")]
    Budget { cost: usize, limit: usize },

    #[error("dataset generation: {0}")]
    Generation(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt { path: path.into(), reason: reason.into() }
    }

    /// Short machine-readable tag used on the CLI diagnostic stream.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::UnknownCapture { .. } => "unknown_layer",
            Error::InvalidNetwork(_) => "invalid_network",
            Error::InputShape { .. } => "input_shape",
            Error::Diverged { .. } => "diverged",
            Error::InvalidData(_) => "invalid_data",
            Error::Io { .. } => "io",
            Error::Corrupt { .. } => "corrupt",
            Error::Version { .. } => "version",
            Error::Checksum { .. } => "checksum",
            Error::CamChannels { .. } => "cam_final_layer_only",
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Budget { .. } => "budget",
            Error::Generation(_) => "generation",
            Error::Metric(_) => "metric",
            Error::Usage(_) => "usage",
        }
    }

    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::UnknownCapture { .. })
    }
}
