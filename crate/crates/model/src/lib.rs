//! Style/structure disentangler, style translation and coordinate-regression
//! landmark detector, built on candle.

pub mod adam;
pub mod checkpoint;
pub mod convert;
pub mod data;
pub mod detector;
pub mod disentangler;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod ops;
pub mod perceptual;
pub mod translation;

pub use error::{Error, Result};
