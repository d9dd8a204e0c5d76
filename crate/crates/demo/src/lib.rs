//! Browser bindings: render a procedural face, show its landmark heatmaps and
//! score jittered landmark predictions.

use avsep_core::datasets::synth::{generate_synth_dataset, SYNTH_SCHEME};
use avsep_core::geometry::render_heatmaps;
use avsep_core::metrics::{
    auc, ced, failure_rate, nme, uniform_grid, NormalizationRule, DEFAULT_AUC_LIMIT, DEFAULT_FAILURE_THRESHOLD,
    DEFAULT_GRID_RESOLUTION,
};
use avsep_core::{rng, LandmarkSet, Point};
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

const MAX_SIZE: usize = 256;
const CED_POINTS: usize = 101;

fn js(e: avsep_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn check_size(size: usize) -> avsep_core::Result<()> {
    if !(8..=MAX_SIZE).contains(&size) {
        return Err(avsep_core::Error::InvalidInput(format!("size must be in 8..={MAX_SIZE}")));
    }
    Ok(())
}

#[wasm_bindgen]
pub struct Face {
    size: usize,
    rgba: Vec<u8>,
    landmarks: Vec<f64>,
}

#[wasm_bindgen]
impl Face {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// Row-major RGBA bytes, ready for `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// `x0, y0, x1, y1, ...` in pixels.
    pub fn landmarks(&self) -> Vec<f64> {
        self.landmarks.clone()
    }
}

fn render(seed: u32, size: usize) -> avsep_core::Result<Face> {
    check_size(size)?;
    let out = generate_synth_dataset(1, size, seed as u64)?;
    let rgb = out.images[0].to_rgb8();
    let rgba = rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect();
    Ok(Face {
        size,
        rgba,
        landmarks: out.dataset.samples()[0].landmarks.to_flat(),
    })
}

#[wasm_bindgen]
pub fn face(seed: u32, size: usize) -> Result<Face, JsError> {
    render(seed, size).map_err(js)
}

fn heatmap_bytes(landmarks: &[f64], size: usize, sigma: f64) -> avsep_core::Result<Vec<u8>> {
    check_size(size)?;
    let set = LandmarkSet::from_flat(SYNTH_SCHEME, landmarks)?;
    let stack = render_heatmaps(&set, size, size, sigma)?;
    let mut out = Vec::with_capacity(size * size * 4);
    for i in 0..size * size {
        let v = (0..stack.channels()).map(|c| stack.channel(c)[i]).fold(0.0f32, f32::max);
        let t = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend([t, (t as f32 * 0.55) as u8, 255 - t, 255]);
    }
    Ok(out)
}

/// Maximum over the per-landmark Gaussian maps, as RGBA.
#[wasm_bindgen]
pub fn heatmaps(landmarks: &[f64], size: usize, sigma: f64) -> Result<Vec<u8>, JsError> {
    heatmap_bytes(landmarks, size, sigma).map_err(js)
}

#[wasm_bindgen]
pub struct Scores {
    nme: f64,
    failure_rate: f64,
    auc: f64,
    ced: Vec<f64>,
}

#[wasm_bindgen]
impl Scores {
    #[wasm_bindgen(getter)]
    pub fn nme(&self) -> f64 {
        self.nme
    }

    #[wasm_bindgen(getter)]
    pub fn failure_rate(&self) -> f64 {
        self.failure_rate
    }

    #[wasm_bindgen(getter)]
    pub fn auc(&self) -> f64 {
        self.auc
    }

    /// Fraction of faces at or below each of `CED_POINTS` thresholds spread
    /// evenly over `[0, 0.1]`.
    pub fn ced(&self) -> Vec<f64> {
        self.ced.clone()
    }
}

fn score(seed: u32, n: usize, size: usize, jitter_px: f64) -> avsep_core::Result<Scores> {
    check_size(size)?;
    let noise = Normal::new(0.0, jitter_px)
        .map_err(|_| avsep_core::Error::InvalidInput("jitter must be a finite non-negative number".into()))?;
    let out = generate_synth_dataset(n, size, seed as u64)?;
    let rule = NormalizationRule::inter_ocular(SYNTH_SCHEME)?;
    let mut r = rng::substream(seed as u64, "demo/jitter");
    let mut nmes = Vec::with_capacity(n);
    for s in out.dataset.samples() {
        let pred = LandmarkSet::new(
            SYNTH_SCHEME,
            s.landmarks
                .points()
                .iter()
                .map(|p| Point::new(p.x + noise.sample(&mut r), p.y + noise.sample(&mut r)))
                .collect(),
        )?;
        nmes.push(nme(&pred, &s.landmarks, &rule)?);
    }
    let grid = uniform_grid(DEFAULT_AUC_LIMIT, CED_POINTS);
    let mut curve = vec![nmes.iter().filter(|&&v| v <= 0.0).count() as f64 / n as f64];
    curve.extend(ced(&nmes, &grid[1..])?.into_iter().map(|(_, f)| f));
    Ok(Scores {
        nme: nmes.iter().sum::<f64>() / n as f64,
        failure_rate: failure_rate(&nmes, DEFAULT_FAILURE_THRESHOLD)?,
        auc: auc(&nmes, DEFAULT_AUC_LIMIT, DEFAULT_GRID_RESOLUTION)?,
        ced: curve,
    })
}

/// Adds Gaussian noise of `jitter_px` to the landmarks of `n` faces and
/// scores the result against the clean landmarks.
#[wasm_bindgen]
pub fn jitter_scores(seed: u32, n: usize, size: usize, jitter_px: f64) -> Result<Scores, JsError> {
    score(seed, n, size, jitter_px).map_err(js)
}
