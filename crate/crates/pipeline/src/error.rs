//! Pipeline error type shared by all stages.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("no face found in frame {frame_id}")]
    NoFace { frame_id: u64 },

    #[error("frame {frame_id} rejected: {reason}")]
    FrameRejected { frame_id: u64, reason: String },

    #[error("non-finite {term} loss at epoch {epoch}, frame {frame_id}")]
    NonFiniteLoss {
        term: String,
        epoch: u32,
        frame_id: u64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] facegan_nn::NnError),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{0}")]
    Other(String),
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit-code class: 1 for validation/config problems, 2 for runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Validation(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
