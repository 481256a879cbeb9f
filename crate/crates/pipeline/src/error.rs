use std::path::PathBuf;

use tryon_core::TryonError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing asset {0}")]
    MissingAsset(PathBuf),
    #[error("invalid pose file: {0}")]
    InvalidPose(String),
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("unknown {kind} id {id:?}")]
    UnknownId { kind: &'static str, id: String },
    #[error("no checkpoint at {0}")]
    CheckpointMissing(PathBuf),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{0} is locked by another training process")]
    Locked(PathBuf),
    #[error("disk full while writing {0}")]
    DiskFull(PathBuf),
    #[error(transparent)]
    Core(#[from] TryonError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// `errno` for "no space left on device".
const ENOSPC: i32 = 28;

impl PipelineError {
    /// Process exit status: 2 config, 3 data, 4 diverged, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Core(TryonError::TrainingDiverged(_)) => 4,
            PipelineError::MissingAsset(_)
            | PipelineError::InvalidPose(_)
            | PipelineError::Image { .. }
            | PipelineError::UnknownId { .. }
            | PipelineError::Core(_) => 3,
            _ => 1,
        }
    }

    /// Wrap an I/O failure on `path`, singling out a full disk.
    pub fn io_at(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        let path = path.into();
        if err.raw_os_error() == Some(ENOSPC) {
            PipelineError::DiskFull(path)
        } else if err.kind() == std::io::ErrorKind::NotFound {
            PipelineError::MissingAsset(path)
        } else {
            PipelineError::Io(std::io::Error::new(err.kind(), format!("{}: {err}", path.display())))
        }
    }
}
