//! Fixed-weight feature extractor for the perceptual reconstruction loss.
//!
//! The network is a VGG-style stack: stages of 3×3 convolutions with ReLU,
//! each stage closed by a 2×2 pooling. Features are tapped after chosen
//! pooling stages, or at the input itself. Weights are never trained: they
//! are either drawn once from a seed or loaded from a safetensors file laid
//! out like torchvision's `features.{i}.weight` / `features.{i}.bias`.

use std::path::PathBuf;

use avsep_core::Image;
use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::convert::image_to_tensor;
use crate::error::{Error, Result};
use crate::nn::{scalar, Conv2d, ParamStore};

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// The (normalized) input image.
    Input,
    /// Output of the i-th pooling stage, 0-based.
    Pool(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualMode {
    FixedRandom { seed: u64 },
    Pretrained { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptualConfig {
    /// `[convs, channels]` per stage.
    pub stages: Vec<(usize, usize)>,
    pub taps: Vec<Tap>,
    pub mode: PerceptualMode,
}

impl Default for PerceptualConfig {
    /// Small random feature net, usable without any downloaded weights.
    fn default() -> Self {
        Self {
            stages: vec![(1, 16), (1, 32), (1, 32), (1, 32)],
            taps: (0..4).map(Tap::Pool).collect(),
            mode: PerceptualMode::FixedRandom { seed: 0 },
        }
    }
}

impl PerceptualConfig {
    /// VGG-19 feature layout with weights read from `path`.
    pub fn vgg19(path: PathBuf) -> Self {
        Self {
            stages: vec![(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)],
            taps: (0..4).map(Tap::Pool).collect(),
            mode: PerceptualMode::Pretrained { path },
        }
    }

    /// Φ = identity: the loss becomes mean squared pixel error.
    pub fn identity() -> Self {
        Self {
            stages: Vec::new(),
            taps: vec![Tap::Input],
            mode: PerceptualMode::FixedRandom { seed: 0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::config("perceptual net needs at least one tap"));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("perceptual taps must be ordered shallow to deep without repeats"));
        }
        for t in &self.taps {
            if let Tap::Pool(i) = t {
                if *i >= self.stages.len() {
                    return Err(Error::config(format!("tap pool {i} beyond {} stages", self.stages.len())));
                }
            }
        }
        if self.stages.iter().any(|&(n, c)| n == 0 || c == 0) {
            return Err(Error::config("perceptual stages need at least one conv and one channel"));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct PerceptualNet {
    stages: Vec<Vec<Conv2d>>,
    taps: Vec<Tap>,
    max_pool: bool,
    /// Per-channel (scale, shift) applied to [-1, 1] input before the net.
    input_affine: Option<Tensor>,
    dtype: DType,
}

impl PerceptualNet {
    pub fn new(cfg: &PerceptualConfig, in_channels: usize, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let depth = cfg
            .taps
            .iter()
            .filter_map(|t| match t {
                Tap::Pool(i) => Some(i + 1),
                Tap::Input => None,
            })
            .max()
            .unwrap_or(0);
        let mut stages = Vec::with_capacity(depth);
        let (max_pool, input_affine) = match &cfg.mode {
            PerceptualMode::FixedRandom { seed } => {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
                let mut ps = ParamStore::new(dtype);
                let mut c_in = in_channels;
                for (s, &(n, c)) in cfg.stages.iter().take(depth).enumerate() {
                    let mut convs = Vec::with_capacity(n);
                    for j in 0..n {
                        let conv = Conv2d::new(&mut ps, &format!("s{s}.c{j}"), c_in, c, 3, 1, &mut rng)?;
                        convs.push(conv.detached());
                        c_in = c;
                    }
                    stages.push(convs);
                }
                (false, None)
            }
            PerceptualMode::Pretrained { path } => {
                if in_channels != 3 {
                    return Err(Error::config("pretrained perceptual weights expect 3-channel images"));
                }
                let weights = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| Error::Checkpoint {
                    path: path.clone(),
                    msg: e.to_string(),
                })?;
                let mut index = 0;
                for &(n, _) in cfg.stages.iter().take(depth) {
                    let mut convs = Vec::with_capacity(n);
                    for _ in 0..n {
                        let get = |suffix: &str| {
                            let key = format!("features.{index}.{suffix}");
                            weights
                                .get(&key)
                                .ok_or_else(|| Error::Checkpoint {
                                    path: path.clone(),
                                    msg: format!("missing {key}"),
                                })
                                .and_then(|t| Ok(t.to_dtype(dtype)?))
                        };
                        convs.push(Conv2d::frozen(get("weight")?, get("bias")?, 1)?);
                        // conv + relu occupy two indices
                        index += 2;
                    }
                    index += 1;
                    stages.push(convs);
                }
                let mut affine = Vec::with_capacity(6);
                for c in 0..3 {
                    // ((x + 1) / 2 - mean) / std
                    affine.push(0.5 / IMAGENET_STD[c]);
                    affine.push((0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
                }
                let t = Tensor::from_vec(affine, (3, 2), &Device::Cpu)?.to_dtype(dtype)?;
                (true, Some(t))
            }
        };
        Ok(Self {
            stages,
            taps: cfg.taps.clone(),
            max_pool,
            input_affine,
            dtype,
        })
    }

    pub fn identity(dtype: DType) -> Self {
        Self::new(&PerceptualConfig::identity(), 1, dtype).expect("identity config is valid")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Tapped features of an (N, C, H, W) batch in [-1, 1], shallow to deep.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = match &self.input_affine {
            None => x.clone(),
            Some(a) => {
                let scale = a.narrow(1, 0, 1)?.reshape((1, 3, 1, 1))?;
                let shift = a.narrow(1, 1, 1)?.reshape((1, 3, 1, 1))?;
                x.broadcast_mul(&scale)?.broadcast_add(&shift)?
            }
        };
        let mut out = Vec::with_capacity(self.taps.len());
        if self.taps.contains(&Tap::Input) {
            out.push(h.clone());
        }
        for (i, convs) in self.stages.iter().enumerate() {
            for conv in convs {
                h = conv.forward(&h)?.relu()?;
            }
            h = if self.max_pool { h.max_pool2d(2)? } else { h.avg_pool2d(2)? };
            if self.taps.contains(&Tap::Pool(i)) {
                out.push(h.clone());
            }
        }
        Ok(out)
    }

    /// Σ_l mean((Φ_l(x) − Φ_l(x̂))²). Gradients flow into `x_hat` only.
    pub fn loss(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        if x.dims() != x_hat.dims() {
            return Err(Error::shape(format!("{:?} vs {:?}", x.dims(), x_hat.dims())));
        }
        let target = self.features(&x.detach())?;
        let pred = self.features(x_hat)?;
        let mut total: Option<Tensor> = None;
        for (a, b) in target.iter().zip(&pred) {
            let term = (b - a)?.sqr()?.mean_all()?;
            total = Some(match total {
                None => term,
                Some(t) => (t + term)?,
            });
        }
        Ok(total.expect("at least one tap"))
    }
}

/// Perceptual distance between two images.
pub fn perceptual_loss(pnet: &PerceptualNet, x: &Image, x_hat: &Image) -> Result<f64> {
    let a = image_to_tensor(x, pnet.dtype())?;
    let b = image_to_tensor(x_hat, pnet.dtype())?;
    scalar(&pnet.loss(&a, &b)?)
}
