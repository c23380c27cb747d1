//! Pseudo-fake synthesis engine and forgery-math toolkit.
//!
//! The engine manufactures training negatives from real face images by
//! reconstructing an image (injecting up-sampling traces), statistically
//! diverging one side of the (source, target) pair, and blending the two
//! through landmark-derived masks (injecting face-inconsistency seams).
//! Every sample carries a provenance record sufficient for bit-exact
//! replay.
//!
//! The numerical side provides framework-agnostic kernels: forgery-aware
//! channel scoring and selection, region-partitioned contrastive
//! regularization at patch and image level, and the weighted total loss,
//! all verifiable against naive scalar oracles.

pub mod config;
pub mod error;
pub mod face_geometry;
pub mod forgery_math;
pub mod pipeline;
pub mod pixel_transforms;
pub mod raster;
pub mod reconstruction;
pub mod spectral_diagnostics;
pub mod synthesis;

pub use error::{ForgeError, Result};
