//! Coordinate-regression landmark detector: a residual backbone and one
//! fully connected layer emitting `2L` normalized coordinates.

use avsep_core::geometry::{AffineJitter, LandmarkScheme, Point};
use avsep_core::rng::{self, Rng};
use avsep_core::{Image, LandmarkSet};
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig, LinearDecay};
use crate::checkpoint::{self, AdamMeta, Checkpoint, CheckpointMeta, DETECTOR_FORMAT};
use crate::convert::{images_to_tensor, rows, rows_to_tensor};
use crate::data::Prepared;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, scalar, Conv2d, Linear, ParamStore, ResBlock, ResDown};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub scheme: LandmarkScheme,
    pub stem_stride: usize,
    /// Output channels of each stage. Every stage halves the resolution.
    pub stage_channels: Vec<usize>,
    /// Residual blocks per stage, the first of them strided.
    pub blocks_per_stage: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            image_channels: 3,
            scheme: LandmarkScheme::P98,
            stem_stride: 2,
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
        }
    }
}

impl DetectorConfig {
    /// Four single-block stages of at most 8 channels on 32×32 inputs.
    pub fn tiny(scheme: LandmarkScheme) -> Self {
        Self {
            image_size: 32,
            image_channels: 3,
            scheme,
            stem_stride: 1,
            stage_channels: vec![4, 8, 8, 8],
            blocks_per_stage: 1,
        }
    }

    pub fn landmarks(&self) -> usize {
        self.scheme.count()
    }

    /// Side of the last feature map.
    pub fn feature_size(&self) -> usize {
        self.image_size / self.stem_stride.max(1) >> self.stage_channels.len().min(20)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.stem_stride == 0 || self.blocks_per_stage == 0 {
            return Err(Error::config("image_channels, stem_stride and blocks_per_stage must be positive"));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::config("stage_channels must be non-empty and positive"));
        }
        if self.landmarks() == 0 {
            return Err(Error::config("the landmark scheme is empty"));
        }
        let div = self.stem_stride << self.stage_channels.len().min(20);
        if self.stage_channels.len() > 12 || self.image_size == 0 || self.image_size % div != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by {div}",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Stage {
    down: ResDown,
    blocks: Vec<ResBlock>,
}

#[derive(Debug)]
pub struct DetectorModel {
    cfg: DetectorConfig,
    ps: ParamStore,
    stem: Conv2d,
    stages: Vec<Stage>,
    head: Linear,
}

impl DetectorModel {
    pub fn new(cfg: &DetectorConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::substream(seed, rng::INIT);
        let rng = &mut rng;
        let mut ps = ParamStore::new(dtype);
        let ps_ = &mut ps;
        let c0 = cfg.stage_channels[0];
        let stem = Conv2d::new(ps_, "stem", cfg.image_channels, c0, 3, cfg.stem_stride, rng)?;
        let mut stages = Vec::with_capacity(cfg.stage_channels.len());
        let mut c_in = c0;
        for (s, &c) in cfg.stage_channels.iter().enumerate() {
            let down = ResDown::new(ps_, &format!("stage{s}.down"), c_in, c, rng)?;
            let blocks = (1..cfg.blocks_per_stage)
                .map(|b| ResBlock::new(ps_, &format!("stage{s}.block{b}"), c, rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, blocks });
            c_in = c;
        }
        let side = cfg.feature_size();
        let head = Linear::new(ps_, "head", c_in * side * side, 2 * cfg.landmarks(), 0.1, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            ps,
            stem,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    pub fn dtype(&self) -> DType {
        self.ps.dtype()
    }

    /// Images (N, C, S, S) in [-1, 1] → coordinates (N, 2L) as fractions of
    /// the side, interleaved x, y.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.cfg.image_size;
        if (c, h, w) != (self.cfg.image_channels, s, s) {
            return Err(Error::shape(format!(
                "image {c}x{h}x{w}, expected {}x{s}x{s}",
                self.cfg.image_channels
            )));
        }
        let mut h = leaky_relu(&self.stem.forward(x)?)?;
        for stage in &self.stages {
            h = stage.down.forward(&h)?;
            for b in &stage.blocks {
                h = b.forward(&h)?;
            }
        }
        let flat = h.flatten_from(1)?;
        Ok(self.head.forward(&flat)?.affine(1.0, 0.5)?)
    }

    fn checkpoint_meta(&self, epoch: usize, adam: Option<&Adam>) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            format: DETECTOR_FORMAT.into(),
            config: serde_json::to_value(&self.cfg).map_err(|e| Error::config(e.to_string()))?,
            epoch,
            adam: adam.map(|a| AdamMeta {
                config: a.config(),
                step: a.steps_taken(),
            }),
            rng: None,
        })
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::to_bytes(&self.checkpoint_meta(0, None)?, &self.ps, None)
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        ck.expect_format(DETECTOR_FORMAT)?;
        let cfg: DetectorConfig =
            serde_json::from_value(ck.meta.config.clone()).map_err(|e| Error::config(e.to_string()))?;
        let model = Self::new(&cfg, 0, dtype)?;
        model.ps.load(&ck.params())?;
        Ok(model)
    }
}

/// Landmarks as fractions of the crop side, flattened x, y.
pub fn normalized_targets(landmarks: &LandmarkSet, size: usize) -> Vec<f64> {
    landmarks.to_flat().iter().map(|v| v / size as f64).collect()
}

/// Mean squared error between predicted and target normalized coordinates.
pub fn detector_loss(model: &DetectorModel, x: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let pred = model.forward(x)?;
    if pred.dims() != targets.dims() {
        return Err(Error::shape(format!("targets {:?} for predictions {:?}", targets.dims(), pred.dims())));
    }
    Ok((pred - targets)?.sqr()?.mean_all()?)
}

/// Landmarks for each image, in pixels of the crop frame.
pub fn predict_batch(model: &DetectorModel, images: &[&Image]) -> Result<Vec<LandmarkSet>> {
    let x = images_to_tensor(images, model.dtype())?;
    let s = model.cfg.image_size as f64;
    rows(&model.forward(&x)?)?
        .into_iter()
        .map(|r| {
            let pts = r.chunks(2).map(|p| Point::new(p[0] * s, p[1] * s)).collect();
            Ok(LandmarkSet::new(model.cfg.scheme, pts)?)
        })
        .collect()
}

pub fn predict(model: &DetectorModel, image: &Image) -> Result<LandmarkSet> {
    Ok(predict_batch(model, &[image])?.remove(0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorLoss {
    #[default]
    L2NormalizedCoords,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMix {
    #[default]
    ConcatenateRealAndSynthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub adam: AdamConfig,
    pub jitter: AffineJitter,
    pub loss: DetectorLoss,
    pub mix: DataMix,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr_start: 1e-3,
            lr_end: 1e-5,
            adam: AdamConfig::default(),
            jitter: AffineJitter::default(),
            loss: DetectorLoss::default(),
            mix: DataMix::default(),
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        let j = &self.jitter;
        if !(j.min_scale > 0.0 && j.min_scale <= j.max_scale && (0.0..=1.0).contains(&j.flip_probability)) {
            return Err(Error::config("jitter needs 0 < min_scale <= max_scale and a flip probability in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct DetectorRun {
    pub model: DetectorModel,
    pub optimizer: Adam,
    pub log: Vec<DetectorEpochLog>,
}

impl DetectorRun {
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let meta = self.model.checkpoint_meta(self.log.len(), Some(&self.optimizer))?;
        checkpoint::to_bytes(&meta, &self.model.ps, Some(&self.optimizer))
    }
}

fn check_samples(samples: &[Prepared], cfg: &DetectorConfig, what: &str) -> Result<()> {
    for p in samples {
        if p.landmarks.scheme() != cfg.scheme {
            return Err(Error::Scheme {
                expected: cfg.scheme.to_string(),
                found: format!("{} ({what} sample {})", p.landmarks.scheme(), p.id),
            });
        }
        if (p.image.width(), p.image.height(), p.image.channels()) != (cfg.image_size, cfg.image_size, cfg.image_channels) {
            return Err(Error::shape(format!(
                "{what} sample {} is {}x{}x{}, expected {}x{1}x{1}",
                p.id,
                p.image.channels(),
                p.image.height(),
                p.image.width(),
                cfg.image_size
            )));
        }
    }
    Ok(())
}

fn jittered_batch(
    batch: &[&Prepared],
    jitter: &AffineJitter,
    rng: &mut Rng,
    size: usize,
    dtype: DType,
) -> Result<(Tensor, Tensor)> {
    let mut images = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for p in batch {
        let (im, lm) = jitter.apply(rng, &p.image, &p.landmarks)?;
        images.push(im);
        targets.push(normalized_targets(&lm, size));
    }
    let x = images_to_tensor(&images.iter().collect::<Vec<_>>(), dtype)?;
    let t = rows_to_tensor(&targets.iter().map(Vec::as_slice).collect::<Vec<_>>(), dtype)?;
    Ok((x, t))
}

/// Adam on the union of real and synthetic samples, shuffled uniformly each
/// epoch. Every sample gets a fresh random similarity jitter per epoch.
pub fn train_detector(
    real: &[Prepared],
    synthetic: &[Prepared],
    cfg: &DetectorConfig,
    train: &DetectorTrainConfig,
    seed: u64,
) -> Result<DetectorRun> {
    train.validate()?;
    if real.is_empty() {
        return Err(Error::config("cannot train a detector without real samples"));
    }
    check_samples(real, cfg, "real")?;
    check_samples(synthetic, cfg, "synthetic")?;
    let model = DetectorModel::new(cfg, seed, DType::F32)?;
    let mut optimizer = Adam::new(train.adam, model.params())?;
    let mut shuffle = rng::substream(seed, rng::SHUFFLE);
    let mut jitter_rng = rng::substream(seed, "data/jitter");
    let all: Vec<&Prepared> = real.iter().chain(synthetic).collect();
    let per_epoch = all.len().div_ceil(train.batch_size);
    let schedule = LinearDecay {
        start: train.lr_start,
        end: train.lr_end,
        total_steps: train.epochs * per_epoch,
    };
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut log = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for epoch in 0..train.epochs {
        order.shuffle(&mut shuffle);
        let mut sum = 0.0;
        let mut lr = schedule.at(step);
        for chunk in order.chunks(train.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| all[i]).collect();
            let (x, t) = jittered_batch(&batch, &train.jitter, &mut jitter_rng, cfg.image_size, DType::F32)?;
            let loss = detector_loss(&model, &x, &t)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|p| p.id.as_str()).collect();
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: format!("detector loss {value} lr {lr} batch {ids:?}"),
                });
            }
            lr = schedule.at(step);
            optimizer.step(model.params(), &loss.backward()?, lr)?;
            sum += value * batch.len() as f64;
            step += 1;
        }
        log.push(DetectorEpochLog {
            epoch,
            loss: sum / all.len() as f64,
            lr,
        });
    }
    Ok(DetectorRun { model, optimizer, log })
}

/// Loss of the current weights on un-jittered samples.
pub fn dataset_loss(model: &DetectorModel, samples: &[Prepared]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(32) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        let (x, t) = jittered_batch(
            &refs,
            &AffineJitter::none(),
            &mut rng::substream(0, rng::DATA),
            model.cfg.image_size,
            model.dtype(),
        )?;
        total += scalar(&detector_loss(model, &x, &t)?)? * chunk.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}
