//! Core algorithms for ray-cast B-mode synthesis from a learnable 3D Gaussian field.
//!
//! The crate is `no_std` (with `alloc`) and holds everything that computes:
//! the scene representation, probe geometry and ray generation, the forward
//! renderer with its quadrature, reverse-mode gradients, the optimizer and
//! refinement loop, image-quality metrics, classical compounding baselines,
//! and the procedural phantom used as an independent reference simulator.
//! File formats, parallel drivers, and the CLI live in the companion
//! `echoray` crate.
//!
//! All lengths are millimeters, all images live in `[0, 1]`, and every random
//! draw flows from an explicit seed, so identical inputs reproduce identical
//! outputs bit for bit.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod baseline;
pub mod conv;
mod error;
pub mod grad;
pub mod image;
pub mod math;
pub mod metrics;
pub mod phantom;
pub mod probe;
pub mod render;
pub mod rng;
pub mod scene;
pub mod ssim;
pub mod train;

pub use error::CoreError;
pub use image::Image;
pub use scene::{BoundingBox, GaussianField, SceneMeta};
