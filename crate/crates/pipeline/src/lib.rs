//! Data loading, two-stage training, checkpoints, inference and the HTTP
//! service for garment transfer.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod imageio;
pub mod infer;
pub mod service;
pub mod train;

pub use config::PipelineConfig;
pub use error::{PipelineError, Result};
pub use tryon_core::toy;
