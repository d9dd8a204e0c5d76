//! Landmark coordinates, crop normalization and Gaussian heatmaps.
//!
//! Coordinates are `(x right, y down)` in pixels with the origin at the
//! center of the top-left pixel.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Landmark index convention of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LandmarkScheme {
    /// 300W / iBUG 68-point markup (also COFW-68 and AFLW-68).
    P68,
    /// WFLW 98-point markup.
    P98,
    /// COFW 29-point markup.
    P29,
    /// AFLW 19-point markup.
    P19,
    /// Procedural faces with the given landmark count.
    Synth(usize),
}

impl LandmarkScheme {
    pub fn count(&self) -> usize {
        match self {
            Self::P68 => 68,
            Self::P98 => 98,
            Self::P29 => 29,
            Self::P19 => 19,
            Self::Synth(n) => *n,
        }
    }

    /// The scheme a bare point count implies when nothing else is known.
    pub fn from_count(n: usize) -> Self {
        match n {
            68 => Self::P68,
            98 => Self::P98,
            29 => Self::P29,
            19 => Self::P19,
            n => Self::Synth(n),
        }
    }

    /// Index permutation that relabels landmarks after a horizontal flip:
    /// flipped point `i` takes the semantic role of original point `perm[i]`.
    pub fn flip_permutation(&self) -> Option<Vec<usize>> {
        let (n, pairs): (usize, &[(usize, usize)]) = match self {
            Self::P68 => (68, FLIP_PAIRS_68),
            Self::P98 => (98, FLIP_PAIRS_98),
            Self::Synth(10) => (10, FLIP_PAIRS_SYNTH10),
            _ => return None,
        };
        let mut perm: Vec<usize> = (0..n).collect();
        for &(a, b) in pairs {
            perm[a] = b;
            perm[b] = a;
        }
        Some(perm)
    }
}

const FLIP_PAIRS_68: &[(usize, usize)] = &[
    // jaw
    (0, 16), (1, 15), (2, 14), (3, 13), (4, 12), (5, 11), (6, 10), (7, 9),
    // brows
    (17, 26), (18, 25), (19, 24), (20, 23), (21, 22),
    // nose
    (31, 35), (32, 34),
    // eyes
    (36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46),
    // mouth
    (48, 54), (49, 53), (50, 52), (55, 59), (56, 58), (60, 64), (61, 63), (65, 67),
];

const FLIP_PAIRS_98: &[(usize, usize)] = &[
    (0, 32), (1, 31), (2, 30), (3, 29), (4, 28), (5, 27), (6, 26), (7, 25),
    (8, 24), (9, 23), (10, 22), (11, 21), (12, 20), (13, 19), (14, 18), (15, 17),
    (33, 46), (34, 45), (35, 44), (36, 43), (37, 42), (38, 50), (39, 49), (40, 48), (41, 47),
    (60, 72), (61, 71), (62, 70), (63, 69), (64, 68), (65, 75), (66, 74), (67, 73),
    (55, 59), (56, 58),
    (76, 82), (77, 81), (78, 80), (87, 83), (86, 84),
    (88, 92), (89, 91), (95, 93), (96, 97),
];

const FLIP_PAIRS_SYNTH10: &[(usize, usize)] = &[(0, 5), (1, 4), (2, 3), (6, 8)];

impl fmt::Display for LandmarkScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::P68 => f.write_str("P68"),
            Self::P98 => f.write_str("P98"),
            Self::P29 => f.write_str("P29"),
            Self::P19 => f.write_str("P19"),
            Self::Synth(n) => write!(f, "SYNTH({n})"),
        }
    }
}

impl FromStr for LandmarkScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P68" => Ok(Self::P68),
            "P98" => Ok(Self::P98),
            "P29" => Ok(Self::P29),
            "P19" => Ok(Self::P19),
            _ => s
                .strip_prefix("SYNTH(")
                .and_then(|rest| rest.strip_suffix(')'))
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n > 0)
                .map(Self::Synth)
                .ok_or_else(|| Error::invalid(format!("unknown landmark scheme {s:?}"))),
        }
    }
}

impl Serialize for LandmarkScheme {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LandmarkScheme {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordered facial keypoints of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    scheme: LandmarkScheme,
    points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(scheme: LandmarkScheme, points: Vec<Point>) -> Result<Self> {
        if points.len() != scheme.count() {
            return Err(Error::invalid(format!(
                "scheme {scheme} needs {} points, got {}",
                scheme.count(),
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::invalid(format!("landmark {i} is not finite")));
        }
        Ok(Self { scheme, points })
    }

    pub fn from_flat(scheme: LandmarkScheme, flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::invalid("odd number of landmark coordinates"));
        }
        Self::new(scheme, flat.chunks(2).map(|c| Point::new(c[0], c[1])).collect())
    }

    pub fn scheme(&self) -> LandmarkScheme {
        self.scheme
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    /// Reorders points so that new point `i` is old point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.points.len() {
            return Err(Error::invalid("permutation length does not match landmark count"));
        }
        Ok(Self {
            scheme: self.scheme,
            points: perm.iter().map(|&i| self.points[i]).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    /// The box spanning a whole `width x height` image.
    pub fn full_image(width: usize, height: usize) -> Self {
        Self {
            x_min: 0.0,
            y_min: 0.0,
            x_max: width as f64,
            y_max: height as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.x_min, self.y_min, self.x_max, self.y_max];
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("bounding box has non-finite coordinates"));
        }
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(Error::invalid(format!(
                "degenerate bounding box ({}, {}, {}, {})",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// 2x3 matrix mapping source pixel coordinates to target pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub fn new(m: [[f64; 3]; 2]) -> Result<Self> {
        let t = Self { m };
        if t.determinant() == 0.0 || !t.determinant().is_finite() {
            return Err(Error::invalid("affine transform is not invertible"));
        }
        Ok(t)
    }

    pub const fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub const fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
        }
    }

    pub const fn scaling(sx: f64, sy: f64) -> Self {
        Self {
            m: [[sx, 0.0, 0.0], [0.0, sy, 0.0]],
        }
    }

    /// Counter-clockwise rotation by `radians` on screen (y down).
    pub fn rotation(radians: f64) -> Self {
        let (s, c) = radians.sin_cos();
        Self {
            m: [[c, s, 0.0], [-s, c, 0.0]],
        }
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// `self` applied first, then `next`.
    pub fn then(&self, next: &AffineTransform) -> AffineTransform {
        let a = &next.m;
        let b = &self.m;
        let mut m = [[0.0; 3]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            row[0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            row[1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            row[2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        AffineTransform { m }
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::invalid("affine transform is not invertible"));
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        Ok(AffineTransform {
            m: [[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]],
        })
    }

    #[inline]
    pub fn apply_xy(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.m[0][2],
            self.m[1][0] * x + self.m[1][1] * y + self.m[1][2],
        )
    }

    pub fn apply(&self, p: Point) -> Point {
        let (x, y) = self.apply_xy(p.x, p.y);
        Point::new(x, y)
    }
}

pub fn apply_transform(landmarks: &LandmarkSet, t: &AffineTransform) -> LandmarkSet {
    LandmarkSet {
        scheme: landmarks.scheme,
        points: landmarks.points.iter().map(|&p| t.apply(p)).collect(),
    }
}

/// The transform taking `bbox` onto a `size x size` canvas: `x' = (x - x_min) * size / width`.
pub fn crop_transform(bbox: &BoundingBox, size: usize) -> Result<AffineTransform> {
    bbox.validate()?;
    if size == 0 {
        return Err(Error::invalid("crop size must be positive"));
    }
    let sx = size as f64 / bbox.width();
    let sy = size as f64 / bbox.height();
    AffineTransform::new([[sx, 0.0, -bbox.x_min * sx], [0.0, sy, -bbox.y_min * sy]])
}

/// Crops `bbox` out of `image` and resamples it to `size x size`, carrying
/// the landmarks along. Pixels outside the source read as zero.
pub fn crop_and_resize(
    image: &Image,
    bbox: &BoundingBox,
    landmarks: &LandmarkSet,
    size: usize,
) -> Result<(Image, LandmarkSet, AffineTransform)> {
    let t = crop_transform(bbox, size)?;
    let (w, h) = (image.width() as f64, image.height() as f64);
    if bbox.x_max <= 0.0 || bbox.y_max <= 0.0 || bbox.x_min >= w || bbox.y_min >= h {
        return Err(Error::invalid("bounding box does not intersect the image"));
    }
    let out = if t == AffineTransform::identity() && image.width() == size && image.height() == size {
        image.clone()
    } else {
        image.warp_affine(&t, size, size, 0.0)?
    };
    Ok((out, apply_transform(landmarks, &t), t))
}

/// Per-landmark Gaussian response maps, channel-major `(L, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    channels: usize,
    height: usize,
    width: usize,
    sigma: f64,
    maps: Vec<f32>,
}

impl HeatmapStack {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn maps(&self) -> &[f32] {
        &self.maps
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.maps[i * n..(i + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.maps[(c * self.height + y) * self.width + x]
    }

    /// `(row, col)` of the maximum of channel `i`, or `None` for an empty channel.
    pub fn argmax(&self, i: usize) -> Option<(usize, usize)> {
        let ch = self.channel(i);
        let (best, &v) = ch
            .iter()
            .enumerate()
            .fold((0, &f32::NEG_INFINITY), |acc, (j, v)| if *v > *acc.1 { (j, v) } else { acc });
        (v > 0.0).then_some((best / self.width, best % self.width))
    }
}

/// Renders one Gaussian channel per landmark:
/// `exp(-((u - x)^2 + (v - y)^2) / (2 sigma^2))` at every pixel center, with
/// the landmark's rounded pixel pinned to 1. Landmarks whose rounded pixel
/// falls outside the canvas give an all-zero channel.
pub fn render_heatmaps(landmarks: &LandmarkSet, height: usize, width: usize, sigma: f64) -> Result<HeatmapStack> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("heatmap sigma must be positive"));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("heatmap size must be positive"));
    }
    let l = landmarks.len();
    let mut maps = vec![0f32; l * height * width];
    let denom = 2.0 * sigma * sigma;
    for (i, p) in landmarks.points().iter().enumerate() {
        let (rx, ry) = (p.x.round(), p.y.round());
        if rx < 0.0 || ry < 0.0 || rx >= width as f64 || ry >= height as f64 {
            continue;
        }
        let ch = &mut maps[i * height * width..(i + 1) * height * width];
        for v in 0..height {
            let dy = v as f64 - p.y;
            for u in 0..width {
                let dx = u as f64 - p.x;
                ch[v * width + u] = (-(dx * dx + dy * dy) / denom).exp() as f32;
            }
        }
        ch[ry as usize * width + rx as usize] = 1.0;
    }
    Ok(HeatmapStack {
        channels: l,
        height,
        width,
        sigma,
        maps,
    })
}

/// Ranges for the random similarity jitter applied to detector training crops.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineJitter {
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub flip_probability: f64,
}

impl Default for AffineJitter {
    fn default() -> Self {
        Self {
            max_rotation_deg: 30.0,
            min_scale: 0.75,
            max_scale: 1.25,
            flip_probability: 0.5,
        }
    }
}

impl AffineJitter {
    pub fn none() -> Self {
        Self {
            max_rotation_deg: 0.0,
            min_scale: 1.0,
            max_scale: 1.0,
            flip_probability: 0.0,
        }
    }

    /// Draws a rotation/scale about the canvas center plus an optional flip.
    /// Returns the transform and whether it mirrors the image.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, size: usize) -> (AffineTransform, bool) {
        let angle = if self.max_rotation_deg > 0.0 {
            rng.random_range(-self.max_rotation_deg..=self.max_rotation_deg).to_radians()
        } else {
            0.0
        };
        let scale = if self.max_scale > self.min_scale {
            rng.random_range(self.min_scale..=self.max_scale)
        } else {
            self.min_scale
        };
        let flip = self.flip_probability > 0.0 && rng.random::<f64>() < self.flip_probability;
        let c = (size as f64 - 1.0) / 2.0;
        let mut t = AffineTransform::translation(-c, -c)
            .then(&AffineTransform::rotation(angle))
            .then(&AffineTransform::scaling(scale, scale));
        if flip {
            t = t.then(&AffineTransform::scaling(-1.0, 1.0));
        }
        (t.then(&AffineTransform::translation(c, c)), flip)
    }

    /// Applies a sampled jitter to a square crop and its landmarks. Mirrored
    /// samples are relabelled with the scheme's flip permutation; schemes
    /// without one are never mirrored.
    pub fn apply<R: Rng + ?Sized>(&self, rng: &mut R, image: &Image, landmarks: &LandmarkSet) -> Result<(Image, LandmarkSet)> {
        let size = image.width();
        let perm = landmarks.scheme().flip_permutation();
        let (mut t, mut flip) = self.sample(rng, size);
        if flip && perm.is_none() {
            t = t.then(&flip_about_center(size));
            flip = false;
        }
        if t == AffineTransform::identity() {
            return Ok((image.clone(), landmarks.clone()));
        }
        let warped = image.warp_affine(&t, size, image.height(), 0.0)?;
        let moved = apply_transform(landmarks, &t);
        let moved = match (flip, perm) {
            (true, Some(p)) => moved.permuted(&p)?,
            _ => moved,
        };
        Ok((warped, moved))
    }
}

fn flip_about_center(size: usize) -> AffineTransform {
    AffineTransform {
        m: [[-1.0, 0.0, size as f64 - 1.0], [0.0, 1.0, 0.0]],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn set(points: &[(f64, f64)]) -> LandmarkSet {
        LandmarkSet::new(
            LandmarkScheme::Synth(points.len()),
            points.iter().map(|&(x, y)| Point::new(x, y)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn landmark_set_rejects_wrong_count_and_nan() {
        assert!(LandmarkSet::new(LandmarkScheme::P68, vec![Point::new(0.0, 0.0); 67]).is_err());
        assert!(LandmarkSet::new(LandmarkScheme::Synth(1), vec![Point::new(f64::NAN, 0.0)]).is_err());
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in [
            LandmarkScheme::P68,
            LandmarkScheme::P98,
            LandmarkScheme::P29,
            LandmarkScheme::P19,
            LandmarkScheme::Synth(10),
        ] {
            assert_eq!(s.to_string().parse::<LandmarkScheme>().unwrap(), s);
        }
        assert!("SYNTH(0)".parse::<LandmarkScheme>().is_err());
        assert!("P70".parse::<LandmarkScheme>().is_err());
    }

    #[test]
    fn flip_permutations_are_involutions() {
        for s in [LandmarkScheme::P68, LandmarkScheme::P98, LandmarkScheme::Synth(10)] {
            let p = s.flip_permutation().unwrap();
            assert_eq!(p.len(), s.count());
            for i in 0..p.len() {
                assert_eq!(p[p[i]], i, "{s} index {i}");
            }
        }
        let p68 = LandmarkScheme::P68.flip_permutation().unwrap();
        assert_eq!(p68[36], 45);
        assert_eq!(p68[30], 30);
        let p98 = LandmarkScheme::P98.flip_permutation().unwrap();
        assert_eq!(p98[60], 72);
        assert_eq!(p98[96], 97);
        assert_eq!(p98.iter().enumerate().filter(|(i, &j)| *i == j).count(), 10);
    }

    #[test]
    fn degenerate_bbox_is_rejected() {
        assert!(BoundingBox::new(1.0, 1.0, 1.0, 5.0).is_err());
        assert!(BoundingBox::new(0.0, 3.0, 4.0, 2.0).is_err());
        let img = Image::zeros(8, 8, 1);
        let bad = BoundingBox {
            x_min: 2.0,
            y_min: 2.0,
            x_max: 2.0,
            y_max: 6.0,
        };
        assert!(crop_and_resize(&img, &bad, &set(&[(1.0, 1.0)]), 4).is_err());
    }

    #[test]
    fn bbox_outside_image_is_rejected() {
        let img = Image::zeros(8, 8, 1);
        let far = BoundingBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert!(crop_and_resize(&img, &far, &set(&[(1.0, 1.0)]), 4).is_err());
    }

    #[test]
    fn full_image_crop_at_native_size_is_identity() {
        let img = Image::from_fn(256, 256, 1, |_, y, x| ((x + y) % 7) as f32 / 7.0);
        let lm = set(&[(10.25, 20.5), (200.0, 3.75)]);
        let (out, moved, t) = crop_and_resize(&img, &BoundingBox::full_image(256, 256), &lm, 256).unwrap();
        assert_eq!(t, AffineTransform::identity());
        assert_eq!(moved, lm);
        assert_eq!(out, img);
    }

    #[test]
    fn upscaling_full_image_doubles_coordinates() {
        let img = Image::zeros(128, 128, 3);
        let lm = set(&[(0.0, 0.0), (17.3, 99.1), (127.0, 64.5)]);
        let (out, moved, _) = crop_and_resize(&img, &BoundingBox::full_image(128, 128), &lm, 256).unwrap();
        assert_eq!((out.width(), out.height()), (256, 256));
        for (a, b) in lm.points().iter().zip(moved.points()) {
            assert_eq!(b.x, 2.0 * a.x);
            assert_eq!(b.y, 2.0 * a.y);
        }
    }

    #[test]
    fn translation_shifts_every_point() {
        let lm = set(&[(1.0, 2.0), (-4.0, 9.5)]);
        let out = apply_transform(&lm, &AffineTransform::translation(5.0, -3.0));
        assert_eq!(out.points()[0], Point::new(6.0, -1.0));
        assert_eq!(out.points()[1], Point::new(1.0, 6.5));
        assert_eq!(apply_transform(&lm, &AffineTransform::identity()), lm);
    }

    #[test]
    fn centered_landmark_peaks_at_center() {
        let hm = render_heatmaps(&set(&[(32.0, 32.0)]), 65, 65, 1.5).unwrap();
        assert_eq!(hm.argmax(0), Some((32, 32)));
        assert_eq!(hm.get(0, 32, 32), 1.0);
    }

    #[test]
    fn gaussian_falloff_matches_closed_form() {
        let hm = render_heatmaps(&set(&[(10.0, 10.0)]), 32, 32, 2.0).unwrap();
        let peak = hm.get(0, 10, 10) as f64;
        // (u, v) = (10, 12): squared distance 4, 2 sigma^2 = 8
        let expected = (-4.0f64 / 8.0).exp() * peak;
        assert!((hm.get(0, 12, 10) as f64 - expected).abs() < 1e-7);
        assert!((hm.get(0, 10, 12) as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn out_of_bounds_landmark_gives_zero_channel() {
        let hm = render_heatmaps(&set(&[(-3.0, 5.0), (5.0, 40.0), (4.0, 4.0)]), 16, 16, 1.5).unwrap();
        assert!(hm.channel(0).iter().all(|&v| v == 0.0));
        assert!(hm.channel(1).iter().all(|&v| v == 0.0));
        assert_eq!(hm.argmax(2), Some((4, 4)));
        assert_eq!(hm.channels(), 3);
    }

    #[test]
    fn heatmap_rejects_bad_sigma() {
        assert!(render_heatmaps(&set(&[(1.0, 1.0)]), 4, 4, 0.0).is_err());
        assert!(render_heatmaps(&set(&[(1.0, 1.0)]), 0, 4, 1.0).is_err());
    }

    #[test]
    fn compose_and_inverse() {
        let t = AffineTransform::rotation(0.3)
            .then(&AffineTransform::scaling(1.7, 0.6))
            .then(&AffineTransform::translation(3.0, -2.0));
        let p = Point::new(4.5, -7.25);
        let q = t.inverse().unwrap().apply(t.apply(p));
        assert!((q.x - p.x).abs() < 1e-12 && (q.y - p.y).abs() < 1e-12);
        assert!(AffineTransform::new([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]]).is_err());
    }

    #[test]
    fn jitter_flip_relabels_synthetic_landmarks() {
        let jitter = AffineJitter {
            max_rotation_deg: 0.0,
            min_scale: 1.0,
            max_scale: 1.0,
            flip_probability: 1.0,
        };
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64 * 3.0 + 1.0, 5.0)).collect();
        let lm = set(&pts);
        let img = Image::from_fn(32, 32, 1, |_, _, x| x as f32 / 31.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (out_img, out) = jitter.apply(&mut rng, &img, &lm).unwrap();
        assert!((out_img.get(0, 0, 0) - 1.0).abs() < 1e-6);
        // new point 0 is old point 5 mirrored
        assert!((out.points()[0].x - (31.0 - lm.points()[5].x)).abs() < 1e-9);
        assert!((out.points()[7].x - (31.0 - lm.points()[7].x)).abs() < 1e-9);
    }

    #[test]
    fn jitter_none_is_identity() {
        let lm = set(&[(3.0, 4.0)]);
        let img = Image::from_fn(8, 8, 1, |_, y, x| (x * y) as f32);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (i2, l2) = AffineJitter::none().apply(&mut rng, &img, &lm).unwrap();
        assert_eq!(i2, img);
        assert_eq!(l2, lm);
    }
}
