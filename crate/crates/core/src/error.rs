use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TryonError {
    #[error("label {label} at ({row}, {col}) is outside 0..=9")]
    InvalidLabel { row: usize, col: usize, label: u8 },
    #[error("pixel ({row}, {col}) has zero mass across all channels")]
    DegeneratePixel { row: usize, col: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("no torso, arm or top-clothes pixels in the segmentation map")]
    EmptyTargetRegion,
    #[error("thin-plate-spline system is singular")]
    SingularTps,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("training diverged: non-finite {0}")]
    TrainingDiverged(String),
    #[error("invalid keypoints: {0}")]
    InvalidKeypoints(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, TryonError>;
