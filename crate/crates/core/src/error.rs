use std::path::PathBuf;

use bgcut_tensor::TensorError;
use thiserror::Error;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = BgError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BgError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("background feature is stale: computed for backbone {found:08x}, model is {expected:08x}")]
    StaleFeature { expected: u32, found: u32 },

    #[error("no background samples; run without attenuation or supply --bg frames")]
    MissingBackground,

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Divergence { iteration: usize, loss: f64 },
}

impl BgError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BgError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error's category.
    pub fn exit_code(&self) -> i32 {
        match self {
            BgError::Io { .. } | BgError::Image { .. } => 3,
            BgError::Checkpoint(_) => 4,
            BgError::Config(_) => 5,
            BgError::Data(_) | BgError::MissingBackground => 6,
            BgError::Tensor(_) | BgError::StaleFeature { .. } => 7,
            BgError::Divergence { .. } => 8,
        }
    }
}
