//! Conditional VAE separating image style from landmark structure.
//!
//! * The style encoder sees the image together with its landmark heatmaps
//!   and outputs a diagonal Gaussian posterior over the style code `z`.
//! * The structure encoder sees the heatmaps only. It keeps its activation
//!   at every scale (the stem plus one per residual block) as skip inputs
//!   for the renderer.
//! * The renderer starts from the deepest structure map. It injects `z` as
//!   a coarse spatial map at the bottleneck and as per-channel scale/shift
//!   at every scale. It upsamples through the skips to a tanh image.
//!
//! None of the networks use batch normalization.

use avsep_core::geometry::{render_heatmaps, AffineTransform};
use avsep_core::rng::{self, Rng};
use avsep_core::{HeatmapStack, Image, LandmarkSet};
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig, LinearDecay};
use crate::checkpoint::{self, AdamMeta, Checkpoint, CheckpointMeta, DISENTANGLER_FORMAT};
use crate::convert::{heatmaps_to_tensor, image_to_tensor, images_to_tensor, rows, tensor_to_images};
use crate::data::Prepared;
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, leaky_relu, scalar, upsample_nearest, Conv2d, Linear, ParamStore, ResDown};
use crate::perceptual::{PerceptualConfig, PerceptualNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisentanglerConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub landmarks: usize,
    /// Heatmaps are rendered at this side length and upsampled to
    /// `image_size` inside the networks.
    pub heatmap_size: usize,
    pub heatmap_sigma: f64,
    /// Stride-2 residual blocks per encoder.
    pub blocks: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub style_dim: usize,
    /// Side of the spatial style map injected at the bottleneck.
    pub style_map_size: usize,
}

impl Default for DisentanglerConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            image_channels: 3,
            landmarks: 98,
            heatmap_size: 64,
            heatmap_sigma: 1.5,
            blocks: 6,
            base_channels: 32,
            max_channels: 256,
            style_dim: 64,
            style_map_size: 4,
        }
    }
}

impl DisentanglerConfig {
    /// 2 blocks, 8 channels, D = 4, 32×32: small enough for exhaustive
    /// finite-difference checks.
    pub fn tiny(landmarks: usize) -> Self {
        Self {
            image_size: 32,
            image_channels: 3,
            landmarks,
            heatmap_size: 16,
            heatmap_sigma: 1.0,
            blocks: 2,
            base_channels: 8,
            max_channels: 8,
            style_dim: 4,
            style_map_size: 2,
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level.min(20)).min(self.max_channels)
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.blocks
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("image_channels", self.image_channels),
            ("landmarks", self.landmarks),
            ("heatmap_size", self.heatmap_size),
            ("blocks", self.blocks),
            ("base_channels", self.base_channels),
            ("max_channels", self.max_channels),
            ("style_dim", self.style_dim),
            ("style_map_size", self.style_map_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.blocks > 12 || self.image_size % (1 << self.blocks) != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by 2^{}",
                self.image_size, self.blocks
            )));
        }
        if self.image_size % self.heatmap_size != 0 {
            return Err(Error::config("heatmap_size must divide image_size"));
        }
        if self.bottleneck_size() % self.style_map_size != 0 {
            return Err(Error::config(format!(
                "style_map_size {} must divide the bottleneck size {}",
                self.style_map_size,
                self.bottleneck_size()
            )));
        }
        if !(self.heatmap_sigma > 0.0 && self.heatmap_sigma.is_finite()) {
            return Err(Error::config("heatmap_sigma must be positive"));
        }
        Ok(())
    }
}

/// Parameters of q(z | x, y).
#[derive(Clone, Debug, PartialEq)]
pub struct StylePosterior {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode {
    pub z: Vec<f64>,
}

/// Structure activations at every scale, full resolution first and the
/// bottleneck last.
#[derive(Clone, Debug)]
pub struct StructureFeatures {
    maps: Vec<Tensor>,
}

impl StructureFeatures {
    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.maps.iter().map(|m| m.dims().to_vec()).collect()
    }

    pub fn batch_size(&self) -> usize {
        self.maps[0].dims()[0]
    }

    /// Raw little-endian bytes of every map, in order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for m in &self.maps {
            let v = m.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(rng::sha256_hex(&self.to_bytes()?))
    }

    /// Item `i` of the batch, repeated `k` times.
    pub fn repeat_item(&self, i: usize, k: usize) -> Result<Self> {
        let maps = self
            .maps
            .iter()
            .map(|m| {
                let one = m.narrow(0, i, 1)?;
                let mut dims = one.dims().to_vec();
                dims[0] = k;
                one.broadcast_as(dims)?.contiguous()
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { maps })
    }
}

#[derive(Debug)]
pub struct DisentanglerModel {
    cfg: DisentanglerConfig,
    ps: ParamStore,
    style_stem: Conv2d,
    style_blocks: Vec<ResDown>,
    style_head: Linear,
    struct_stem: Conv2d,
    struct_blocks: Vec<ResDown>,
    style_map: Linear,
    dec_in: Conv2d,
    /// Indexed by the level the conv produces, 0 = full resolution.
    dec_up: Vec<Conv2d>,
    /// Indexed by level, 0..=blocks.
    films: Vec<Linear>,
    to_image: Conv2d,
}

impl DisentanglerModel {
    /// Builds a model with weights drawn from the `init` substream of `seed`.
    pub fn new(cfg: &DisentanglerConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::substream(seed, rng::INIT);
        let rng = &mut rng;
        let mut ps = ParamStore::new(dtype);
        let ps_ = &mut ps;
        let b = cfg.blocks;
        let ch = |i| cfg.channels(i);
        let d = cfg.style_dim;

        let style_stem = Conv2d::new(ps_, "style.stem", cfg.image_channels + cfg.landmarks, ch(0), 3, 1, rng)?;
        let style_blocks = (1..=b)
            .map(|i| ResDown::new(ps_, &format!("style.block{i}"), ch(i - 1), ch(i), rng))
            .collect::<Result<Vec<_>>>()?;
        let style_head = Linear::new(ps_, "style.head", ch(b), 2 * d, 1.0, rng)?;

        let struct_stem = Conv2d::new(ps_, "struct.stem", cfg.landmarks, ch(0), 3, 1, rng)?;
        let struct_blocks = (1..=b)
            .map(|i| ResDown::new(ps_, &format!("struct.block{i}"), ch(i - 1), ch(i), rng))
            .collect::<Result<Vec<_>>>()?;

        let m = cfg.style_map_size;
        let style_map = Linear::new(ps_, "render.style_map", d, ch(b) * m * m, 1.0, rng)?;
        let dec_in = Conv2d::new(ps_, "render.in", 2 * ch(b), ch(b), 3, 1, rng)?;
        let dec_up = (0..b)
            .map(|i| Conv2d::new(ps_, &format!("render.up{i}"), ch(i + 1) + ch(i), ch(i), 3, 1, rng))
            .collect::<Result<Vec<_>>>()?;
        let films = (0..=b)
            .map(|i| Linear::new(ps_, &format!("render.film{i}"), d, 2 * ch(i), 0.5, rng))
            .collect::<Result<Vec<_>>>()?;
        let to_image = Conv2d::new(ps_, "render.out", ch(0), cfg.image_channels, 3, 1, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            ps,
            style_stem,
            style_blocks,
            style_head,
            struct_stem,
            struct_blocks,
            style_map,
            dec_in,
            dec_up,
            films,
            to_image,
        })
    }

    pub fn config(&self) -> &DisentanglerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn dtype(&self) -> DType {
        self.ps.dtype()
    }

    /// Heatmaps for landmarks given in the image frame.
    pub fn heatmaps(&self, landmarks: &LandmarkSet) -> Result<HeatmapStack> {
        if landmarks.len() != self.cfg.landmarks {
            return Err(Error::shape(format!(
                "{} landmarks for a model expecting {}",
                landmarks.len(),
                self.cfg.landmarks
            )));
        }
        let s = self.cfg.heatmap_size as f64 / self.cfg.image_size as f64;
        let scaled = avsep_core::geometry::apply_transform(landmarks, &AffineTransform::scaling(s, s));
        Ok(render_heatmaps(&scaled, self.cfg.heatmap_size, self.cfg.heatmap_size, self.cfg.heatmap_sigma)?)
    }

    pub fn heatmap_batch(&self, landmarks: &[&LandmarkSet]) -> Result<Tensor> {
        let stacks = landmarks.iter().map(|l| self.heatmaps(l)).collect::<Result<Vec<_>>>()?;
        heatmaps_to_tensor(&stacks.iter().collect::<Vec<_>>(), self.dtype())
    }

    fn check_heatmaps(&self, h: &Tensor) -> Result<()> {
        let (_, c, hh, hw) = h.dims4()?;
        let s = self.cfg.heatmap_size;
        if (c, hh, hw) != (self.cfg.landmarks, s, s) {
            return Err(Error::shape(format!(
                "heatmaps {c}x{hh}x{hw}, expected {}x{s}x{s}",
                self.cfg.landmarks
            )));
        }
        Ok(())
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.cfg.image_size;
        if (c, h, w) != (self.cfg.image_channels, s, s) {
            return Err(Error::shape(format!(
                "image {c}x{h}x{w}, expected {}x{s}x{s}",
                self.cfg.image_channels
            )));
        }
        Ok(())
    }

    fn upsampled(&self, heatmaps: &Tensor) -> Result<Tensor> {
        upsample_nearest(heatmaps, self.cfg.image_size / self.cfg.heatmap_size)
    }

    /// Batched style encoder: images (N, C, S, S) in [-1, 1] and heatmaps
    /// (N, L, s, s) → (mu, logvar), each (N, D).
    pub fn style_forward(&self, x: &Tensor, heatmaps: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_images(x)?;
        self.check_heatmaps(heatmaps)?;
        if x.dims()[0] != heatmaps.dims()[0] {
            return Err(Error::shape("image and heatmap batch sizes differ"));
        }
        let input = Tensor::cat(&[x, &self.upsampled(heatmaps)?], 1)?;
        let mut h = leaky_relu(&self.style_stem.forward(&input)?)?;
        for block in &self.style_blocks {
            h = block.forward(&h)?;
        }
        let out = self.style_head.forward(&global_avg_pool(&h)?)?;
        let d = self.cfg.style_dim;
        Ok((out.narrow(1, 0, d)?, out.narrow(1, d, d)?))
    }

    /// Batched structure encoder.
    pub fn structure_forward(&self, heatmaps: &Tensor) -> Result<StructureFeatures> {
        self.check_heatmaps(heatmaps)?;
        let mut maps = Vec::with_capacity(self.cfg.blocks + 1);
        let mut h = leaky_relu(&self.struct_stem.forward(&self.upsampled(heatmaps)?)?)?;
        maps.push(h.clone());
        for block in &self.struct_blocks {
            h = block.forward(&h)?;
            maps.push(h.clone());
        }
        Ok(StructureFeatures { maps })
    }

    fn film(&self, level: usize, h: &Tensor, z: &Tensor) -> Result<Tensor> {
        let c = self.cfg.channels(level);
        let n = z.dims()[0];
        let gb = self.films[level].forward(z)?;
        let gamma = gb.narrow(1, 0, c)?.reshape((n, c, 1, 1))?.affine(1.0, 1.0)?;
        let beta = gb.narrow(1, c, c)?.reshape((n, c, 1, 1))?;
        Ok(h.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }

    /// Batched renderer: z (N, D) and structure features → images in [-1, 1].
    pub fn render_forward(&self, z: &Tensor, s: &StructureFeatures) -> Result<Tensor> {
        let b = self.cfg.blocks;
        let want: Vec<Vec<usize>> = (0..=b)
            .map(|i| {
                let side = self.cfg.image_size >> i;
                vec![self.cfg.channels(i), side, side]
            })
            .collect();
        let got: Vec<Vec<usize>> = s.maps.iter().map(|m| m.dims()[1..].to_vec()).collect();
        if got != want {
            return Err(Error::shape(format!("structure features {got:?}, expected {want:?}")));
        }
        let n = s.batch_size();
        if z.dims() != [n, self.cfg.style_dim] {
            return Err(Error::shape(format!("style code {:?} for a batch of {n}", z.dims())));
        }
        let m = self.cfg.style_map_size;
        let style = self.style_map.forward(z)?.reshape((n, self.cfg.channels(b), m, m))?;
        let style = upsample_nearest(&style, self.cfg.bottleneck_size() / m)?;
        let h = self.dec_in.forward(&Tensor::cat(&[&s.maps[b], &style], 1)?)?;
        let mut h = leaky_relu(&self.film(b, &h, z)?)?;
        for level in (0..b).rev() {
            let up = upsample_nearest(&h, 2)?;
            let cat = Tensor::cat(&[&up, &s.maps[level]], 1)?;
            let y = self.dec_up[level].forward(&cat)?;
            h = leaky_relu(&self.film(level, &y, z)?)?;
        }
        Ok(self.to_image.forward(&h)?.tanh()?)
    }

    /// Deterministic reconstruction of a batch through the posterior mean.
    pub fn reconstruct_forward(&self, x: &Tensor, heatmaps: &Tensor) -> Result<Tensor> {
        let (mu, _) = self.style_forward(x, heatmaps)?;
        let s = self.structure_forward(heatmaps)?;
        self.render_forward(&mu, &s)
    }

    fn checkpoint_meta(&self, epoch: usize, adam: Option<&Adam>, rng: Option<&Rng>) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            format: DISENTANGLER_FORMAT.into(),
            config: serde_json::to_value(&self.cfg).map_err(|e| Error::config(e.to_string()))?,
            epoch,
            adam: adam.map(|a| AdamMeta {
                config: a.config(),
                step: a.steps_taken(),
            }),
            rng: rng
                .map(serde_json::to_value)
                .transpose()
                .map_err(|e| Error::config(e.to_string()))?,
        })
    }

    /// Checkpoint bytes holding only the weights and config.
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::to_bytes(&self.checkpoint_meta(0, None, None)?, &self.ps, None)
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        ck.expect_format(DISENTANGLER_FORMAT)?;
        let cfg: DisentanglerConfig =
            serde_json::from_value(ck.meta.config.clone()).map_err(|e| Error::config(e.to_string()))?;
        let model = Self::new(&cfg, 0, dtype)?;
        model.ps.load(&ck.params())?;
        Ok(model)
    }
}

fn single(image: &Image, heatmaps: &HeatmapStack, dtype: DType) -> Result<(Tensor, Tensor)> {
    Ok((image_to_tensor(image, dtype)?, heatmaps_to_tensor(&[heatmaps], dtype)?))
}

pub fn encode_style(model: &DisentanglerModel, image: &Image, heatmaps: &HeatmapStack) -> Result<StylePosterior> {
    let (x, h) = single(image, heatmaps, model.dtype())?;
    let (mu, logvar) = model.style_forward(&x, &h)?;
    Ok(StylePosterior {
        mu: rows(&mu)?.remove(0),
        logvar: rows(&logvar)?.remove(0),
    })
}

pub fn encode_structure(model: &DisentanglerModel, heatmaps: &HeatmapStack) -> Result<StructureFeatures> {
    model.structure_forward(&heatmaps_to_tensor(&[heatmaps], model.dtype())?)
}

/// z = mu + exp(logvar / 2) ⊙ ε with ε ~ N(0, I).
pub fn sample_posterior(posterior: &StylePosterior, rng: &mut impl rand::Rng) -> StyleCode {
    let z = posterior
        .mu
        .iter()
        .zip(&posterior.logvar)
        .map(|(m, lv)| m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    StyleCode { z }
}

pub fn render(model: &DisentanglerModel, z: &StyleCode, structure: &StructureFeatures) -> Result<Image> {
    let zt = Tensor::from_vec(z.z.clone(), (1, z.z.len()), &Device::Cpu)?.to_dtype(model.dtype())?;
    Ok(tensor_to_images(&model.render_forward(&zt, structure)?)?.remove(0))
}

/// Posterior-mean reconstruction of one image.
pub fn reconstruct(model: &DisentanglerModel, image: &Image, heatmaps: &HeatmapStack) -> Result<Image> {
    let (x, h) = single(image, heatmaps, model.dtype())?;
    Ok(tensor_to_images(&model.reconstruct_forward(&x, &h)?)?.remove(0))
}

/// KL(q || N(0, I)) = 0.5 Σ_d (mu² + exp(logvar) − logvar − 1).
pub fn kl_divergence(posterior: &StylePosterior) -> f64 {
    0.5 * posterior
        .mu
        .iter()
        .zip(&posterior.logvar)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

/// Batched KL, summed over D and averaged over the batch.
pub fn kl_tensor(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let per = ((mu.sqr()? + logvar.exp()?)? - logvar)?.affine(1.0, -1.0)?;
    Ok(per.sum(1)?.mean_all()?.affine(0.5, 0.0)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// rec(x, render(z, E_struct(y))) + beta · KL with z drawn from the style
/// posterior. Returns the differentiable total and the scalar terms.
pub fn disentangle_loss(
    model: &DisentanglerModel,
    pnet: &PerceptualNet,
    x: &Tensor,
    heatmaps: &Tensor,
    rng: &mut impl rand::Rng,
    beta: f64,
) -> Result<(Tensor, LossTerms)> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::config("beta must be non-negative"));
    }
    let (mu, logvar) = model.style_forward(x, heatmaps)?;
    let eps: Vec<f64> = (0..mu.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
    let eps = Tensor::from_vec(eps, mu.dims(), &Device::Cpu)?.to_dtype(mu.dtype())?;
    let z = (&mu + logvar.affine(0.5, 0.0)?.exp()?.mul(&eps)?)?;
    let x_hat = model.render_forward(&z, &model.structure_forward(heatmaps)?)?;
    let rec = pnet.loss(x, &x_hat)?;
    let kl = kl_tensor(&mu, &logvar)?;
    let total = (&rec + kl.affine(beta, 0.0)?)?;
    let terms = LossTerms {
        total: scalar(&total)?,
        reconstruction: scalar(&rec)?,
        kl: scalar(&kl)?,
    };
    Ok((total, terms))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Full,
    NoKl,
    NoPerceptual,
}

impl LossVariant {
    pub const ALL: [LossVariant; 3] = [LossVariant::Full, LossVariant::NoKl, LossVariant::NoPerceptual];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossVariant::Full => "full",
            LossVariant::NoKl => "no_kl",
            LossVariant::NoPerceptual => "no_perceptual",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown loss variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisentanglerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta: f64,
    pub variant: LossVariant,
    pub adam: AdamConfig,
    pub perceptual: PerceptualConfig,
}

impl Default for DisentanglerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr_start: 0.01,
            lr_end: 0.0001,
            beta: 1.0,
            variant: LossVariant::Full,
            adam: AdamConfig::default(),
            perceptual: PerceptualConfig::default(),
        }
    }
}

impl DisentanglerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta must be non-negative"));
        }
        self.perceptual.validate()
    }

    /// KL weight after applying the loss variant.
    pub fn effective_beta(&self) -> f64 {
        match self.variant {
            LossVariant::NoKl => 0.0,
            _ => self.beta,
        }
    }

    pub fn reconstruction_net(&self, in_channels: usize, dtype: DType) -> Result<PerceptualNet> {
        match self.variant {
            LossVariant::NoPerceptual => Ok(PerceptualNet::identity(dtype)),
            _ => PerceptualNet::new(&self.perceptual, in_channels, dtype),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct DisentanglerRun {
    pub model: DisentanglerModel,
    pub optimizer: Adam,
    pub log: Vec<EpochLog>,
    pub rng: Rng,
}

impl DisentanglerRun {
    /// Full checkpoint: weights, optimizer moments, epoch and sampling RNG.
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let meta = self
            .model
            .checkpoint_meta(self.log.len(), Some(&self.optimizer), Some(&self.rng))?;
        checkpoint::to_bytes(&meta, &self.model.ps, Some(&self.optimizer))
    }
}

/// Image and heatmap tensors for a list of prepared samples.
pub fn batch_tensors(model: &DisentanglerModel, samples: &[&Prepared]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let x = images_to_tensor(&images, model.dtype())?;
    let lms: Vec<&LandmarkSet> = samples.iter().map(|s| &s.landmarks).collect();
    Ok((x, model.heatmap_batch(&lms)?))
}

/// Mean reconstruction loss over `samples` with z at the posterior mean.
pub fn reconstruction_loss(model: &DisentanglerModel, pnet: &PerceptualNet, samples: &[Prepared]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(32) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        let (x, h) = batch_tensors(model, &refs)?;
        let x_hat = model.reconstruct_forward(&x, &h)?;
        total += scalar(&pnet.loss(&x, &x_hat)?)? * chunk.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Minibatch Adam on the disentangling loss. Shuffling, initialization and
/// posterior sampling each use their own substream of `seed`.
pub fn train_disentangler(
    samples: &[Prepared],
    cfg: &DisentanglerConfig,
    train: &DisentanglerTrainConfig,
    seed: u64,
) -> Result<DisentanglerRun> {
    train.validate()?;
    if samples.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    let model = DisentanglerModel::new(cfg, seed, DType::F32)?;
    let pnet = train.reconstruction_net(cfg.image_channels, DType::F32)?;
    let beta = train.effective_beta();
    let mut optimizer = Adam::new(train.adam, model.params())?;
    let mut sampling = rng::substream(seed, rng::SAMPLING);
    let mut shuffle = rng::substream(seed, rng::SHUFFLE);
    let (x_all, h_all) = batch_tensors(&model, &samples.iter().collect::<Vec<_>>())?;
    let per_epoch = samples.len().div_ceil(train.batch_size);
    let schedule = LinearDecay {
        start: train.lr_start,
        end: train.lr_end,
        total_steps: train.epochs * per_epoch,
    };
    let mut order: Vec<u32> = (0..samples.len() as u32).collect();
    let mut log = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for epoch in 0..train.epochs {
        order.shuffle(&mut shuffle);
        let (mut sum, mut sum_rec, mut sum_kl) = (0.0, 0.0, 0.0);
        let mut lr = schedule.at(step);
        for batch in order.chunks(train.batch_size) {
            let idx = Tensor::new(batch, &Device::Cpu)?;
            let x = x_all.index_select(&idx, 0)?;
            let h = h_all.index_select(&idx, 0)?;
            let (loss, terms) = disentangle_loss(&model, &pnet, &x, &h, &mut sampling, beta)?;
            if !terms.total.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|&i| samples[i as usize].id.as_str()).collect();
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: format!(
                        "reconstruction {} kl {} lr {lr} batch {ids:?}",
                        terms.reconstruction, terms.kl
                    ),
                });
            }
            lr = schedule.at(step);
            optimizer.step(model.params(), &loss.backward()?, lr)?;
            let w = batch.len() as f64;
            sum += terms.total * w;
            sum_rec += terms.reconstruction * w;
            sum_kl += terms.kl * w;
            step += 1;
        }
        let n = samples.len() as f64;
        log.push(EpochLog {
            epoch,
            loss: sum / n,
            reconstruction: sum_rec / n,
            kl: sum_kl / n,
            lr,
        });
    }
    Ok(DisentanglerRun {
        model,
        optimizer,
        log,
        rng: sampling,
    })
}

/// Posterior means for every sample, one row per sample.
pub fn posterior_means(model: &DisentanglerModel, samples: &[Prepared]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        let (x, h) = batch_tensors(model, &refs)?;
        let (mu, _) = model.style_forward(&x, &h)?;
        out.extend(rows(&mu)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::IndexOp;
    use avsep_core::geometry::{LandmarkScheme, Point};
    use rand::SeedableRng;

    fn landmarks(shift: f64) -> LandmarkSet {
        let pts = (0..3)
            .map(|i| Point::new(8.0 + 6.0 * i as f64 + shift, 10.0 + 4.0 * i as f64))
            .collect();
        LandmarkSet::new(LandmarkScheme::Synth(3), pts).unwrap()
    }

    fn model() -> DisentanglerModel {
        DisentanglerModel::new(&DisentanglerConfig::tiny(3), 5, DType::F32).unwrap()
    }

    fn image(seed: usize) -> Image {
        Image::from_fn(32, 32, 3, |c, y, x| ((x * 7 + y * 13 + c * 5 + seed * 11) % 17) as f32 / 16.0)
    }

    #[test]
    fn default_config_matches_full_scale_layout() {
        let cfg = DisentanglerConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.style_dim, 64);
        assert_eq!(cfg.image_size, 256);
        assert_eq!(cfg.blocks, 6);
        assert_eq!(cfg.bottleneck_size(), 4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = DisentanglerConfig::tiny(3);
        cfg.image_size = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = DisentanglerConfig::tiny(3);
        cfg.style_map_size = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn structure_scales_match_renderer_expectations() {
        let m = model();
        let s = encode_structure(&m, &m.heatmaps(&landmarks(0.0)).unwrap()).unwrap();
        assert_eq!(s.shapes(), vec![vec![1, 8, 32, 32], vec![1, 8, 16, 16], vec![1, 8, 8, 8]]);
        let out = render(&m, &StyleCode { z: vec![0.0; 4] }, &s).unwrap();
        assert_eq!((out.width(), out.height(), out.channels()), (32, 32, 3));
    }

    #[test]
    fn all_zero_heatmaps_give_finite_features() {
        let m = model();
        let h = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let s = m.structure_forward(&h).unwrap();
        for map in s.maps() {
            assert!(map.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn posterior_is_deterministic_and_sized() {
        let m = model();
        let h = m.heatmaps(&landmarks(0.0)).unwrap();
        let a = encode_style(&m, &image(0), &h).unwrap();
        assert_eq!(a.mu.len(), 4);
        assert_eq!(a, encode_style(&m, &image(0), &h).unwrap());
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let m = model();
        let h = m.heatmaps(&landmarks(0.0)).unwrap();
        assert!(encode_style(&m, &Image::zeros(16, 16, 3), &h).is_err());
        let bad = LandmarkSet::new(LandmarkScheme::Synth(2), vec![Point::new(1.0, 1.0); 2]).unwrap();
        assert!(m.heatmaps(&bad).is_err());
        let s = encode_structure(&m, &h).unwrap();
        assert!(render(&m, &StyleCode { z: vec![0.0; 3] }, &s).is_err());
    }

    #[test]
    fn collapsed_posterior_samples_its_mean() {
        let p = StylePosterior {
            mu: vec![0.3, -1.2],
            logvar: vec![-30.0, -30.0],
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let z = sample_posterior(&p, &mut rng);
        for (a, b) in z.z.iter().zip(&p.mu) {
            assert!((a - b).abs() < 1e-5);
        }
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let q = StylePosterior {
            mu: vec![0.0; 3],
            logvar: vec![0.0; 3],
        };
        assert_eq!(sample_posterior(&q, &mut r1), sample_posterior(&q, &mut r2));
    }

    #[test]
    fn kl_closed_form_cases() {
        let zero = StylePosterior {
            mu: vec![0.0; 5],
            logvar: vec![0.0; 5],
        };
        assert_eq!(kl_divergence(&zero), 0.0);
        let mut one = zero.clone();
        one.mu[0] = 1.0;
        assert_eq!(kl_divergence(&one), 0.5);
        let mu = Tensor::new(&[[1.0f64, 0.0], [0.0, 0.0]], &Device::Cpu).unwrap();
        let lv = Tensor::zeros((2, 2), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(scalar(&kl_tensor(&mu, &lv).unwrap()).unwrap(), 0.25);
    }

    #[test]
    fn perturbing_z_changes_the_render() {
        let m = model();
        let s = encode_structure(&m, &m.heatmaps(&landmarks(0.0)).unwrap()).unwrap();
        let a = render(&m, &StyleCode { z: vec![0.0; 4] }, &s).unwrap();
        let b = render(&m, &StyleCode { z: vec![1.0, -1.0, 0.5, 0.0] }, &s).unwrap();
        assert_eq!(a, render(&m, &StyleCode { z: vec![0.0; 4] }, &s).unwrap());
        assert_ne!(a, b);
        assert!(b.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn beta_zero_leaves_reconstruction_only() {
        let m = model();
        let pnet = PerceptualNet::identity(DType::F32);
        let x = image_to_tensor(&image(1), DType::F32).unwrap();
        let h = m.heatmap_batch(&[&landmarks(0.0)]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (_, t) = disentangle_loss(&m, &pnet, &x, &h, &mut rng, 0.0).unwrap();
        assert_eq!(t.total, t.reconstruction);
        assert!(t.kl >= 0.0 && t.total >= 0.0);
        assert!(disentangle_loss(&m, &pnet, &x, &h, &mut rng, -1.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let m = model();
        let ck = checkpoint::from_bytes(&m.to_checkpoint_bytes().unwrap()).unwrap();
        let back = DisentanglerModel::from_checkpoint(&ck, DType::F32).unwrap();
        let h = m.heatmaps(&landmarks(1.0)).unwrap();
        assert_eq!(reconstruct(&m, &image(2), &h).unwrap(), reconstruct(&back, &image(2), &h).unwrap());
    }

    #[test]
    fn repeat_item_broadcasts_one_recipient() {
        let m = model();
        let h = m.heatmap_batch(&[&landmarks(0.0), &landmarks(2.0)]).unwrap();
        let s = m.structure_forward(&h).unwrap();
        let r = s.repeat_item(1, 3).unwrap();
        assert_eq!(r.batch_size(), 3);
        let one = m.structure_forward(&h.i(1..2).unwrap()).unwrap();
        let a = r.maps()[2].i(2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = one.maps()[2].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_variants_parse() {
        for v in LossVariant::ALL {
            assert_eq!(v.as_str().parse::<LossVariant>().unwrap(), v);
        }
        assert!("bogus".parse::<LossVariant>().is_err());
    }
}
