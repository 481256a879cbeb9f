//! Domain model and networks for two-stage garment transfer: segmentation
//! masking, shape generation, thin-plate-spline alignment, appearance
//! generation and evaluation metrics.

pub mod alignment;
pub mod appearance;
pub mod backbone;
pub mod data;
pub mod error;
pub mod masking;
pub mod metrics;

pub use error::{Result, TryonError};
pub mod nets;
pub mod sample;
pub mod shape;
pub mod toy;
