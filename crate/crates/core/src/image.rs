//! Planar floating-point images.
//!
//! Pixel values are nominally in `[0, 1]`. Pixel `(row, col)` has its center
//! at continuous coordinate `(x = col, y = row)`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::AffineTransform;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    /// Channel-major: `data[(c * height + y) * width + x]`.
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_planar(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "planar buffer has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    /// Bilinear sample at continuous `(x, y)`; outside the image reads `fill`.
    pub fn sample_bilinear(&self, c: usize, x: f64, y: f64, fill: f32) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let at = |xi: i64, yi: i64| -> f32 {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                fill
            } else {
                self.get(c, yi as usize, xi as usize)
            }
        };
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Resamples this image into a `width x height` canvas. `transform` maps
    /// source coordinates to target coordinates.
    pub fn warp_affine(&self, transform: &AffineTransform, width: usize, height: usize, fill: f32) -> Result<Image> {
        let inv = transform.inverse()?;
        let mut out = Image::zeros(width, height, self.channels);
        for y in 0..height {
            for x in 0..width {
                let src = inv.apply_xy(x as f64, y as f64);
                for c in 0..self.channels {
                    out.set(c, y, x, self.sample_bilinear(c, src.0, src.1, fill));
                }
            }
        }
        Ok(out)
    }

    /// Mirrors the image left-to-right.
    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.width, self.height, self.channels, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.width * self.height * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let src = if self.channels == 1 { 0 } else { c };
                    out.push(quantize(self.get(src, y, x)));
                }
            }
        }
        out
    }

    /// Rounds every value to the nearest 8-bit level, the precision of the
    /// on-disk PNG form.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        use ::image::ImageEncoder;
        let (color, bytes) = match self.channels {
            1 => (
                ::image::ExtendedColorType::L8,
                self.data.iter().map(|&v| quantize(v)).collect::<Vec<_>>(),
            ),
            3 => (::image::ExtendedColorType::Rgb8, self.to_rgb8()),
            c => return Err(Error::invalid(format!("cannot encode {c}-channel image as PNG"))),
        };
        let mut buf = Vec::new();
        ::image::codecs::png::PngEncoder::new(&mut buf)
            .write_image(&bytes, self.width as u32, self.height as u32, color)
            .map_err(|source| Error::Image {
                path: "<memory>".into(),
                source,
            })?;
        Ok(buf)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        let img = ::image::load_from_memory_with_format(bytes, ::image::ImageFormat::Png).map_err(|source| {
            Error::Image {
                path: "<memory>".into(),
                source,
            }
        })?;
        Ok(Self::from_dynamic(img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = ::image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_dynamic(img))
    }

    fn from_dynamic(img: ::image::DynamicImage) -> Image {
        match img {
            ::image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                let data = g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
                Image {
                    width: w as usize,
                    height: h as usize,
                    channels: 1,
                    data,
                }
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                let (w, h) = (w as usize, h as usize);
                let raw = rgb.into_raw();
                Image::from_fn(w, h, 3, |c, y, x| raw[(y * w + x) * 3 + c] as f32 / 255.0)
            }
        }
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_of_quantized_image_is_exact() {
        let img = Image::from_fn(5, 4, 3, |c, y, x| ((c * 31 + y * 7 + x * 13) % 256) as f32 / 255.0);
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn grayscale_png_round_trip() {
        let img = Image::from_fn(3, 3, 1, |_, y, x| (y * 3 + x) as f32 / 8.0).quantized();
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn bilinear_interpolates_between_pixel_centers() {
        let img = Image::from_fn(2, 1, 1, |_, _, x| x as f32);
        assert!((img.sample_bilinear(0, 0.25, 0.0, 0.0) - 0.25).abs() < 1e-6);
        assert_eq!(img.sample_bilinear(0, -3.0, 0.0, 0.5), 0.5);
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = Image::from_fn(6, 4, 2, |c, y, x| (c + y * x) as f32 * 0.1);
        let out = img.warp_affine(&AffineTransform::identity(), 6, 4, 0.0).unwrap();
        assert_eq!(out, img);
    }
}
