//! Conversions between core image types and network tensors.
//!
//! Networks see images in [-1, 1]; [`Image`] stores [0, 1].

use avsep_core::{HeatmapStack, Image};
use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Stacks images into an (N, C, H, W) tensor scaled to [-1, 1].
pub fn images_to_tensor(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::shape("empty image batch"))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        if (im.channels(), im.height(), im.width()) != (c, h, w) {
            return Err(Error::shape(format!(
                "image {}x{}x{} in a batch of {c}x{h}x{w}",
                im.channels(),
                im.height(),
                im.width()
            )));
        }
        data.extend(im.data().iter().map(|&v| v * 2.0 - 1.0));
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn image_to_tensor(image: &Image, dtype: DType) -> Result<Tensor> {
    images_to_tensor(&[image], dtype)
}

/// Splits an (N, C, H, W) tensor in [-1, 1] into images, clamped to [0, 1].
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let per = c * h * w;
    (0..n)
        .map(|i| {
            let data = flat[i * per..(i + 1) * per]
                .iter()
                .map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
                .collect();
            Ok(Image::from_planar(w, h, c, data)?)
        })
        .collect()
}

pub fn heatmaps_to_tensor(stacks: &[&HeatmapStack], dtype: DType) -> Result<Tensor> {
    let first = stacks.first().ok_or_else(|| Error::shape("empty heatmap batch"))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(stacks.len() * c * h * w);
    for s in stacks {
        if (s.channels(), s.height(), s.width()) != (c, h, w) {
            return Err(Error::shape("heatmap stacks of different shapes in one batch"));
        }
        data.extend_from_slice(s.maps());
    }
    Ok(Tensor::from_vec(data, (stacks.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Rows of an (N, D) tensor as f64 vectors.
pub fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

pub fn rows_to_tensor(rows: &[&[f64]], dtype: DType) -> Result<Tensor> {
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("rows of different lengths"));
    }
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (rows.len(), d), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip_is_exact_for_dyadic_values() {
        let im = Image::from_fn(3, 2, 2, |c, y, x| (c * 6 + y * 3 + x) as f32 / 16.0);
        let t = image_to_tensor(&im, DType::F32).unwrap();
        assert_eq!(t.dims(), &[1, 2, 2, 3]);
        assert_eq!(tensor_to_images(&t).unwrap()[0], im);
    }

    #[test]
    fn mixed_sizes_are_rejected() {
        let a = Image::zeros(4, 4, 3);
        let b = Image::zeros(5, 4, 3);
        assert!(images_to_tensor(&[&a, &b], DType::F32).is_err());
    }
}
