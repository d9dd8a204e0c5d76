//! Procedural faces with separately drawn structure and style factors.
//!
//! A face is an ellipse head with two eye disks and a mouth arc. The
//! structure factors fix the geometry and therefore the ten landmarks; the
//! style factors only change how the scene is shaded (background colour,
//! a linear lighting ramp, an occluding rectangle, blur and sensor noise).
//! The two factor groups come from separate random streams, so any
//! statistical dependence between them is sampling noise.
//!
//! Landmark order (left/right as seen in the image):
//!
//! | index | landmark                 |
//! |-------|--------------------------|
//! | 0     | left eye, outer corner   |
//! | 1     | left eye, center         |
//! | 2     | left eye, inner corner   |
//! | 3     | right eye, inner corner  |
//! | 4     | right eye, center        |
//! | 5     | right eye, outer corner  |
//! | 6     | mouth, left corner       |
//! | 7     | mouth, center            |
//! | 8     | mouth, right corner      |
//! | 9     | chin                     |

use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::{Attribute, Dataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, LandmarkScheme, LandmarkSet, Point};
use crate::image::Image;
use crate::rng;

pub const SYNTH_LANDMARKS: usize = 10;
pub const SYNTH_SCHEME: LandmarkScheme = LandmarkScheme::Synth(SYNTH_LANDMARKS);

/// Indices of the outer eye corners.
pub const OUTER_EYE_CORNERS: (usize, usize) = (0, 5);
/// Indices of the eye centers.
pub const EYE_CENTERS: (usize, usize) = (1, 4);

const SKIN: [f64; 3] = [0.88, 0.72, 0.60];
const EYE: [f64; 3] = [0.12, 0.10, 0.10];
const LIPS: [f64; 3] = [0.60, 0.12, 0.15];
const EYE_RADIUS: f64 = 0.16;
const MOUTH_LEVEL: f64 = 0.45;
const MOUTH_HALF_THICKNESS: f64 = 0.9;
const OCCLUDER_PROBABILITY: f64 = 0.3;

/// Geometry of one face. Positions and radii are fractions of the image
/// side; the remaining factors are fractions of the face radii.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureFactors {
    pub center_x: f64,
    pub center_y: f64,
    pub radius_x: f64,
    pub radius_y: f64,
    /// Half the distance between eye centers, in units of `radius_x`.
    pub eye_spacing: f64,
    /// Height of the eyes above the face center, in units of `radius_y`.
    pub eye_height: f64,
    /// Half the mouth width, in units of `radius_x`.
    pub mouth_width: f64,
    /// Vertical offset of the mouth center from its corners, in units of `radius_y`.
    pub mouth_curvature: f64,
}

impl StructureFactors {
    pub const COLUMNS: [&'static str; 8] = [
        "center_x",
        "center_y",
        "radius_x",
        "radius_y",
        "eye_spacing",
        "eye_height",
        "mouth_width",
        "mouth_curvature",
    ];

    pub const RANGES: [RangeInclusive<f64>; 8] = [
        0.42..=0.58,
        0.40..=0.54,
        0.24..=0.34,
        0.30..=0.40,
        0.30..=0.50,
        0.20..=0.40,
        0.25..=0.50,
        -0.12..=0.12,
    ];

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let v: Vec<f64> = Self::RANGES.iter().map(|r| rng.random_range(r.clone())).collect();
        Self {
            center_x: v[0],
            center_y: v[1],
            radius_x: v[2],
            radius_y: v[3],
            eye_spacing: v[4],
            eye_height: v[5],
            mouth_width: v[6],
            mouth_curvature: v[7],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.center_x,
            self.center_y,
            self.radius_x,
            self.radius_y,
            self.eye_spacing,
            self.eye_height,
            self.mouth_width,
            self.mouth_curvature,
        ]
    }

    fn pixels(&self, size: usize) -> FaceGeometry {
        let s = size as f64;
        let (cx, cy) = (self.center_x * s, self.center_y * s);
        let (rx, ry) = (self.radius_x * s, self.radius_y * s);
        let eye_dx = self.eye_spacing * rx;
        let eye_y = cy - self.eye_height * ry;
        let mouth_y = cy + MOUTH_LEVEL * ry;
        FaceGeometry {
            cx,
            cy,
            rx,
            ry,
            eyes: [Point::new(cx - eye_dx, eye_y), Point::new(cx + eye_dx, eye_y)],
            eye_radius: EYE_RADIUS * rx,
            mouth_y,
            mouth_half_width: self.mouth_width * rx,
            mouth_sag: self.mouth_curvature * ry,
        }
    }

    /// The ten landmarks of this face on a `size x size` canvas.
    pub fn landmarks(&self, size: usize) -> LandmarkSet {
        let g = self.pixels(size);
        let [l, r] = g.eyes;
        let er = g.eye_radius;
        let points = vec![
            Point::new(l.x - er, l.y),
            l,
            Point::new(l.x + er, l.y),
            Point::new(r.x - er, r.y),
            r,
            Point::new(r.x + er, r.y),
            Point::new(g.cx - g.mouth_half_width, g.mouth_y),
            Point::new(g.cx, g.mouth_y + g.mouth_sag),
            Point::new(g.cx + g.mouth_half_width, g.mouth_y),
            Point::new(g.cx, g.cy + g.ry),
        ];
        LandmarkSet::new(SYNTH_SCHEME, points).expect("ten finite points")
    }
}

struct FaceGeometry {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    eyes: [Point; 2],
    eye_radius: f64,
    mouth_y: f64,
    mouth_half_width: f64,
    mouth_sag: f64,
}

/// Appearance of one face. The occluder rectangle is placed relative to the
/// face box: `occluder_x/y` locate its center and `occluder_w/h` its size
/// as fractions of the box, so it never covers more than 20% of the box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleFactors {
    pub background: [f64; 3],
    /// Direction of the lighting ramp, radians.
    pub light_angle: f64,
    /// Relative brightness change from the image center to its edge.
    pub light_strength: f64,
    pub noise_std: f64,
    /// Gaussian blur sigma in pixels; below 0.3 no blur is applied.
    pub blur_sigma: f64,
    pub occluder: bool,
    pub occluder_x: f64,
    pub occluder_y: f64,
    pub occluder_w: f64,
    pub occluder_h: f64,
    pub occluder_gray: f64,
}

impl StyleFactors {
    pub const COLUMNS: [&'static str; 13] = [
        "background_r",
        "background_g",
        "background_b",
        "light_angle",
        "light_strength",
        "noise_std",
        "blur_sigma",
        "occluder",
        "occluder_x",
        "occluder_y",
        "occluder_w",
        "occluder_h",
        "occluder_gray",
    ];

    /// Columns of [`StyleFactors::probe_vec`].
    pub const PROBE_COLUMNS: [&'static str; 8] = [
        "background_r",
        "background_g",
        "background_b",
        "light_x",
        "light_y",
        "noise_std",
        "blur_sigma",
        "occluder",
    ];

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let background = [
            rng.random_range(0.0..=1.0),
            rng.random_range(0.0..=1.0),
            rng.random_range(0.0..=1.0),
        ];
        let light_angle = rng.random_range(0.0..std::f64::consts::TAU);
        let light_strength = rng.random_range(0.0..=0.6);
        let noise_std = rng.random_range(0.0..=0.08);
        let blur_sigma = rng.random_range(0.0..=1.5);
        let occluder = rng.random::<f64>() < OCCLUDER_PROBABILITY;
        Self {
            background,
            light_angle,
            light_strength,
            noise_std,
            blur_sigma,
            occluder,
            occluder_x: rng.random_range(0.0..=1.0),
            occluder_y: rng.random_range(0.0..=1.0),
            occluder_w: rng.random_range(0.2..=0.44),
            occluder_h: rng.random_range(0.2..=0.44),
            occluder_gray: rng.random_range(0.1..=0.9),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.background[0],
            self.background[1],
            self.background[2],
            self.light_angle,
            self.light_strength,
            self.noise_std,
            self.blur_sigma,
            if self.occluder { 1.0 } else { 0.0 },
            self.occluder_x,
            self.occluder_y,
            self.occluder_w,
            self.occluder_h,
            self.occluder_gray,
        ]
    }

    /// Regression targets for linear probes: the lighting ramp as a vector
    /// instead of a circular angle.
    pub fn probe_vec(&self) -> Vec<f64> {
        vec![
            self.background[0],
            self.background[1],
            self.background[2],
            self.light_strength * self.light_angle.cos(),
            self.light_strength * self.light_angle.sin(),
            self.noise_std,
            self.blur_sigma,
            if self.occluder { 1.0 } else { 0.0 },
        ]
    }

    pub fn attributes(&self) -> BTreeSet<Attribute> {
        let mut a = BTreeSet::new();
        if self.light_strength > 0.4 {
            a.insert(Attribute::Illumination);
        }
        if self.occluder {
            a.insert(Attribute::Occlusion);
        }
        if self.blur_sigma > 1.0 {
            a.insert(Attribute::Blur);
        }
        a
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthFactors {
    pub structure: StructureFactors,
    pub style: StyleFactors,
}

impl SynthFactors {
    pub fn csv_header() -> String {
        let mut cols = vec!["id"];
        cols.extend(StructureFactors::COLUMNS);
        cols.extend(StyleFactors::COLUMNS);
        cols.join(",")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub image_size: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 300,
            image_size: 64,
            channels: 3,
            seed: 0,
        }
    }
}

pub struct SynthOutput {
    /// Sample `i` has id `synth-{i:05}` and image path `images/synth-{i:05}.png`.
    pub dataset: Dataset,
    pub factors: Vec<SynthFactors>,
    /// Quantized to 8 bits, so each equals its decoded PNG.
    pub images: Vec<Image>,
}

impl SynthOutput {
    /// The factor sidecar: one CSV row per sample, columns named after the
    /// factor fields.
    pub fn factors_csv(&self) -> String {
        let mut out = SynthFactors::csv_header();
        out.push('\n');
        for (s, f) in self.dataset.samples().iter().zip(&self.factors) {
            let mut row = vec![s.id.clone()];
            row.extend(f.structure.to_vec().iter().map(|v| format!("{v}")));
            row.extend(f.style.to_vec().iter().map(|v| format!("{v}")));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn sample_id(i: usize) -> String {
    format!("synth-{i:05}")
}

pub fn generate_synth_dataset(n: usize, image_size: usize, seed: u64) -> Result<SynthOutput> {
    generate(&SynthConfig {
        n,
        image_size,
        channels: 3,
        seed,
    })
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    if cfg.n == 0 {
        return Err(Error::invalid("synthetic dataset needs n > 0"));
    }
    if cfg.image_size < 8 {
        return Err(Error::invalid("synthetic image size must be at least 8"));
    }
    if cfg.channels != 1 && cfg.channels != 3 {
        return Err(Error::invalid("synthetic images have 1 or 3 channels"));
    }
    let mut structure_rng = rng::substream(cfg.seed, "data/structure");
    let mut style_rng = rng::substream(cfg.seed, "data/style");
    let mut samples = Vec::with_capacity(cfg.n);
    let mut factors = Vec::with_capacity(cfg.n);
    let mut images = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let f = SynthFactors {
            structure: StructureFactors::sample(&mut structure_rng),
            style: StyleFactors::sample(&mut style_rng),
        };
        let mut noise_rng = rng::substream(cfg.seed, &format!("data/noise/{i}"));
        images.push(render_face(&f, cfg.image_size, cfg.channels, &mut noise_rng).quantized());
        let id = sample_id(i);
        let mut s = Sample::real(
            id.clone(),
            format!("images/{id}.png"),
            f.structure.landmarks(cfg.image_size),
            BoundingBox::full_image(cfg.image_size, cfg.image_size),
        );
        s.attributes = Some(f.style.attributes());
        samples.push(s);
        factors.push(f);
    }
    Ok(SynthOutput {
        dataset: Dataset::new(SYNTH_SCHEME, samples)?,
        factors,
        images,
    })
}

#[inline]
fn coverage(signed_distance: f64) -> f64 {
    (0.5 - signed_distance).clamp(0.0, 1.0)
}

/// Renders one face. `noise_rng` only feeds the sensor noise.
pub fn render_face<R: Rng + ?Sized>(factors: &SynthFactors, size: usize, channels: usize, noise_rng: &mut R) -> Image {
    let g = factors.structure.pixels(size);
    let st = &factors.style;
    let half = size as f64 / 2.0;
    let (ls, lc) = st.light_angle.sin_cos();
    let box_w = 2.0 * g.rx;
    let box_h = 2.0 * g.ry;
    let occ_cx = g.cx - g.rx + st.occluder_x * box_w;
    let occ_cy = g.cy - g.ry + st.occluder_y * box_h;
    let occ_hw = st.occluder_w * box_w / 2.0;
    let occ_hh = st.occluder_h * box_h / 2.0;

    let mut rgb = vec![[0f64; 3]; size * size];
    for v in 0..size {
        for u in 0..size {
            let (x, y) = (u as f64, v as f64);
            let mut c = st.background;

            let nx = (x - g.cx) / g.rx;
            let ny = (y - g.cy) / g.ry;
            let face_d = ((nx * nx + ny * ny).sqrt() - 1.0) * g.rx.min(g.ry);
            blend(&mut c, SKIN, coverage(face_d));

            for e in &g.eyes {
                let d = (x - e.x).hypot(y - e.y) - g.eye_radius;
                blend(&mut c, EYE, coverage(d));
            }

            let t = (x - g.cx) / g.mouth_half_width;
            if t.abs() <= 1.0 + 1.0 / g.mouth_half_width {
                let tc = t.clamp(-1.0, 1.0);
                let arc_y = g.mouth_y + g.mouth_sag * (1.0 - tc * tc);
                let end_x = g.cx + tc * g.mouth_half_width;
                let d = (x - end_x).hypot(y - arc_y) - MOUTH_HALF_THICKNESS;
                let d = if t.abs() <= 1.0 { (y - arc_y).abs() - MOUTH_HALF_THICKNESS } else { d };
                blend(&mut c, LIPS, coverage(d));
            }

            let light = (1.0 + st.light_strength * ((x - half) * lc + (y - half) * ls) / half).max(0.0);
            for ch in c.iter_mut() {
                *ch *= light;
            }

            if st.occluder {
                let dx = (x - occ_cx).abs() - occ_hw;
                let dy = (y - occ_cy).abs() - occ_hh;
                let d = dx.max(dy);
                blend(&mut c, [st.occluder_gray; 3], coverage(d));
            }
            rgb[v * size + u] = c;
        }
    }

    if st.blur_sigma >= 0.3 {
        gaussian_blur(&mut rgb, size, st.blur_sigma);
    }

    let mut img = Image::zeros(size, size, channels);
    for v in 0..size {
        for u in 0..size {
            let c = rgb[v * size + u];
            if channels == 1 {
                let lum = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
                let n: f64 = StandardNormal.sample(noise_rng);
                img.set(0, v, u, (lum + st.noise_std * n).clamp(0.0, 1.0) as f32);
            } else {
                for (ch, val) in c.iter().enumerate() {
                    let n: f64 = StandardNormal.sample(noise_rng);
                    img.set(ch, v, u, (val + st.noise_std * n).clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    img
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], alpha: f64) {
    if alpha > 0.0 {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = *d * (1.0 - alpha) + s * alpha;
        }
    }
}

fn gaussian_blur(buf: &mut [[f64; 3]], size: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let clamp = |i: i64| i.clamp(0, size as i64 - 1) as usize;
    let mut tmp = vec![[0f64; 3]; buf.len()];
    for v in 0..size {
        for u in 0..size {
            let mut acc = [0f64; 3];
            for (k, w) in kernel.iter().enumerate() {
                let src = buf[v * size + clamp(u as i64 + k as i64 - radius)];
                for c in 0..3 {
                    acc[c] += w * src[c];
                }
            }
            tmp[v * size + u] = acc.map(|a| a / norm);
        }
    }
    for v in 0..size {
        for u in 0..size {
            let mut acc = [0f64; 3];
            for (k, w) in kernel.iter().enumerate() {
                let src = tmp[clamp(v as i64 + k as i64 - radius) * size + u];
                for c in 0..3 {
                    acc[c] += w * src[c];
                }
            }
            buf[v * size + u] = acc.map(|a| a / norm);
        }
    }
}
