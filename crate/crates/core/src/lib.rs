//! Part-pose guided re-identification of individual cats from camera-trap
//! images: data ingestion, part cropping, augmentation, the multi-stream
//! embedding network, its losses, training, evaluation and export.

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod export;
pub mod geometry;
pub mod losses;
pub mod network;
pub mod preview;
pub mod raster;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};

/// Compute device for models and tensors.
pub use candle_core::Device;
