use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AsrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AsrError {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error: {0}")]
    Wav(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("g2p failed for {word:?}: no orthographic unit matches at position {position}")]
    G2p { word: String, position: usize },

    #[error("target of {needed} frames cannot be aligned to {frames} frames")]
    InfeasibleAlignment { needed: usize, frames: usize },

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AsrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AsrError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool: 1 usage, 2 data, 3 numeric/verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            AsrError::InvalidArgument(_) => 1,
            AsrError::Io { .. }
            | AsrError::Wav(_)
            | AsrError::Data(_)
            | AsrError::G2p { .. }
            | AsrError::Version { .. }
            | AsrError::Json(_) => 2,
            AsrError::Shape(_)
            | AsrError::InfeasibleAlignment { .. }
            | AsrError::Autodiff(_)
            | AsrError::Numeric(_)
            | AsrError::Checksum { .. }
            | AsrError::Truncated(_) => 3,
        }
    }
}
