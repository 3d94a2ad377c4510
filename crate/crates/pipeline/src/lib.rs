//! Person-specific RGBD face synthesis from facial landmark maps.
//!
//! The pipeline learns a conditional GAN that maps a binary 70-point
//! facial landmark map (FLM) to a 4-channel RGBD face image of one person,
//! then fuses generated color and depth into a textured 2.5D point cloud:
//!
//! 1. [`preprocess`] — register raw depth onto the color grid, clip a
//!    255 mm metric window to 8-bit codes, sharpen color contrast.
//! 2. [`landmarks`] — 68 detected points plus two gradient-located iris
//!    centers, square crop, 512x512 resize, FLM rendering.
//! 3. [`model`] / [`training`] — U-Net generator (1 in, 4 out channels),
//!    three 5-channel patch discriminators, least-squares adversarial loss
//!    with feature matching, L1 and a perceptual term.
//! 4. [`infer`] — immutable generator sessions with latency accounting.
//! 5. [`pointcloud`] — pinhole back-projection and binary PLY export.
//! 6. [`evaluate`] — SSIM, perceptual distance, depth-error maps, face
//!    masking, figure grids.
//!
//! The `parallel` feature (default) runs per-frame and per-row work on
//! rayon; results are bit-identical to the sequential fallback.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod imgutil;
pub mod infer;
pub mod landmarks;
pub mod model;
pub mod pointcloud;
pub mod preprocess;
pub mod synthetic;
pub mod training;

pub use config::PipelineConfig;
pub use error::{PipelineError, Result};
