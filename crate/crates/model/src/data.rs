//! Cropping datasets into the fixed-size frames the networks consume.

use std::path::Path;

use avsep_core::datasets::{Dataset, Sample};
use avsep_core::geometry::{crop_and_resize, AffineTransform};
use avsep_core::{Image, LandmarkSet};

use crate::error::{Error, Result};

/// One sample cropped to its bounding box and resized to a square frame.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub image: Image,
    /// Landmarks in the crop frame.
    pub landmarks: LandmarkSet,
    /// Maps original image coordinates to the crop frame.
    pub transform: AffineTransform,
}

/// Loads every sample image, resolving relative paths against `root`.
pub fn load_images(dataset: &Dataset, root: &Path) -> Result<Vec<Image>> {
    dataset
        .samples()
        .iter()
        .map(|s| Ok(Image::load(&root.join(&s.image_path))?))
        .collect()
}

pub fn prepare_sample(sample: &Sample, image: &Image, size: usize) -> Result<Prepared> {
    let (image, landmarks, transform) = crop_and_resize(image, &sample.bbox, &sample.landmarks, size)?;
    Ok(Prepared {
        id: sample.id.clone(),
        image,
        landmarks,
        transform,
    })
}

pub fn prepare(dataset: &Dataset, images: &[Image], size: usize) -> Result<Vec<Prepared>> {
    if images.len() != dataset.n() {
        return Err(Error::shape(format!("{} images for {} samples", images.len(), dataset.n())));
    }
    dataset
        .samples()
        .iter()
        .zip(images)
        .map(|(s, im)| prepare_sample(s, im, size))
        .collect()
}
