//! Core data model for landmark-preserving style augmentation: landmark
//! geometry and heatmaps, dataset formats (300W `.pts`, WFLW annotation
//! lines, JSON-lines manifests), a procedural face generator with separately
//! controlled structure and style factors, and face-alignment metrics.
//!
//! Nothing in this crate depends on a tensor backend, so it also builds for
//! `wasm32-unknown-unknown`.

pub mod datasets;
pub mod error;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod plot;
pub mod rng;

pub use error::{Error, Result};
pub use geometry::{AffineTransform, BoundingBox, HeatmapStack, LandmarkScheme, LandmarkSet, Point};
pub use image::Image;
