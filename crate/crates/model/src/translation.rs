//! Style translation between faces and the augmentation builder.

use std::path::Path;

use avsep_core::datasets::{Dataset, Sample};
use avsep_core::{rng, Image, LandmarkSet};
use candle_core::{Device, Tensor};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::convert::{images_to_tensor, rows, tensor_to_images};
use crate::data::{prepare, Prepared};
use crate::disentangler::{
    encode_structure, encode_style, render, sample_posterior, DisentanglerModel, StructureFeatures, StyleCode,
    StylePosterior,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DonorSampling {
    #[default]
    UniformWithoutReplacementExcludingSelf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Style donors per real image.
    pub k: usize,
    pub donor_sampling: DonorSampling,
    pub use_posterior_mean: bool,
    /// Encode the donor image together with the recipient's heatmaps instead
    /// of its own.
    pub recipient_conditioned_style: bool,
    /// Taken from the run seed, never from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            k: 8,
            donor_sampling: DonorSampling::default(),
            use_posterior_mean: true,
            recipient_conditioned_style: false,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k > n.saturating_sub(1) {
            return Err(Error::config(format!(
                "k = {} needs at least {} real samples, got {n}",
                self.k,
                self.k + 1
            )));
        }
        Ok(())
    }
}

fn check_scheme(expected: &LandmarkSet, found: &LandmarkSet) -> Result<()> {
    if expected.scheme() != found.scheme() {
        return Err(Error::Scheme {
            expected: expected.scheme().to_string(),
            found: found.scheme().to_string(),
        });
    }
    Ok(())
}

fn style_code(posterior: &StylePosterior, use_posterior_mean: bool, rng: &mut impl rand::Rng) -> StyleCode {
    if use_posterior_mean {
        StyleCode {
            z: posterior.mu.clone(),
        }
    } else {
        sample_posterior(posterior, rng)
    }
}

/// Renders `recipient`'s structure in the style of `donor`. Both are in the
/// model's crop frame. The donor is encoded with its own landmarks.
pub fn translate_style(
    model: &DisentanglerModel,
    donor: (&Image, &LandmarkSet),
    recipient: &LandmarkSet,
    use_posterior_mean: bool,
    rng: &mut impl rand::Rng,
) -> Result<Image> {
    check_scheme(recipient, donor.1)?;
    let posterior = encode_style(model, donor.0, &model.heatmaps(donor.1)?)?;
    let structure = encode_structure(model, &model.heatmaps(recipient)?)?;
    render(model, &style_code(&posterior, use_posterior_mean, rng), &structure)
}

/// As [`translate_style`], but the donor image is encoded with the
/// recipient's heatmaps.
pub fn translate_style_recipient_conditioned(
    model: &DisentanglerModel,
    donor: &Image,
    recipient: &LandmarkSet,
    use_posterior_mean: bool,
    rng: &mut impl rand::Rng,
) -> Result<Image> {
    let heatmaps = model.heatmaps(recipient)?;
    let posterior = encode_style(model, donor, &heatmaps)?;
    let structure = encode_structure(model, &heatmaps)?;
    render(model, &style_code(&posterior, use_posterior_mean, rng), &structure)
}

/// One recipient rendered in several styles, with the structure features the
/// renderer consumed (one batch item per style).
#[derive(Debug)]
pub struct Translation {
    pub images: Vec<Image>,
    pub structure: StructureFeatures,
}

fn render_styles(model: &DisentanglerModel, codes: &[StyleCode], heatmaps: &Tensor) -> Result<(Vec<Image>, StructureFeatures)> {
    let z: Vec<f64> = codes.iter().flat_map(|c| c.z.iter().copied()).collect();
    let z = Tensor::from_vec(z, (codes.len(), model.config().style_dim), &Device::Cpu)?.to_dtype(model.dtype())?;
    let structure = model.structure_forward(heatmaps)?.repeat_item(0, codes.len())?;
    let images = tensor_to_images(&model.render_forward(&z, &structure)?)?;
    Ok((images, structure))
}

/// Batched [`translate_style`]: the recipient's structure is encoded once
/// and shared by every donor.
pub fn translate_many(
    model: &DisentanglerModel,
    donors: &[(&Image, &LandmarkSet)],
    recipient: &LandmarkSet,
    use_posterior_mean: bool,
    rng: &mut impl rand::Rng,
) -> Result<Translation> {
    if donors.is_empty() {
        return Err(Error::config("no donors to translate from"));
    }
    for (_, lm) in donors {
        check_scheme(recipient, lm)?;
    }
    let ims: Vec<&Image> = donors.iter().map(|d| d.0).collect();
    let lms: Vec<&LandmarkSet> = donors.iter().map(|d| d.1).collect();
    let codes: Vec<StyleCode> = posteriors(model, &ims, &model.heatmap_batch(&lms)?)?
        .iter()
        .map(|q| style_code(q, use_posterior_mean, rng))
        .collect();
    let (images, structure) = render_styles(model, &codes, &model.heatmap_batch(&[recipient])?)?;
    Ok(Translation { images, structure })
}

/// Donors for every recipient, `k` each, drawn without replacement from the
/// other `n - 1` indices in draw order.
pub fn assign_donors(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k > n.saturating_sub(1) {
        return Err(Error::config(format!("k = {k} exceeds n - 1 = {}", n.saturating_sub(1))));
    }
    let mut rng = rng::substream(seed, "sampling/donors");
    Ok((0..n)
        .map(|i| {
            if k == 0 {
                return Vec::new();
            }
            index::sample(&mut rng, n - 1, k)
                .into_iter()
                .map(|j| if j >= i { j + 1 } else { j })
                .collect()
        })
        .collect())
}

pub fn synthetic_id(recipient: &str, donor: &str) -> String {
    format!("{recipient}~{donor}")
}

/// Synthetic samples and their images, in the same order.
#[derive(Clone, Debug)]
pub struct Augmented {
    pub dataset: Dataset,
    pub images: Vec<Image>,
}

impl Augmented {
    /// Writes every image as PNG under `root` at its manifest path.
    pub fn write_images(&self, root: &Path) -> Result<()> {
        for (s, im) in self.dataset.samples().iter().zip(&self.images) {
            let path = root.join(&s.image_path);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|source| Error::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
            }
            im.save_png(&path)?;
        }
        Ok(())
    }
}

fn posteriors(model: &DisentanglerModel, images: &[&Image], heatmaps: &Tensor) -> Result<Vec<StylePosterior>> {
    let x = images_to_tensor(images, model.dtype())?;
    let (mu, logvar) = model.style_forward(&x, heatmaps)?;
    Ok(rows(&mu)?
        .into_iter()
        .zip(rows(&logvar)?)
        .map(|(mu, logvar)| StylePosterior { mu, logvar })
        .collect())
}

/// Maps a crop-frame render back onto the recipient's original canvas.
fn to_original_frame(render: Image, p: &Prepared, width: usize, height: usize) -> Result<Image> {
    if p.transform == avsep_core::geometry::AffineTransform::identity()
        && render.width() == width
        && render.height() == height
    {
        return Ok(render);
    }
    Ok(render.warp_affine(&p.transform.inverse()?, width, height, 0.0)?)
}

/// Builds `k · n` synthetic samples: every real sample is rendered with the
/// styles of `k` other samples and keeps its own landmarks and box.
pub fn augment_dataset(
    model: &DisentanglerModel,
    dataset: &Dataset,
    images: &[Image],
    cfg: &AugmentConfig,
) -> Result<Augmented> {
    cfg.validate(dataset.n())?;
    let n = dataset.n();
    if n > 0 && dataset.samples()[0].landmarks.len() != model.config().landmarks {
        return Err(Error::Scheme {
            expected: format!("{} landmarks", model.config().landmarks),
            found: dataset.scheme().to_string(),
        });
    }
    let donors = assign_donors(n, cfg.k, cfg.seed)?;
    if cfg.k == 0 {
        return Ok(Augmented {
            dataset: Dataset::empty(dataset.scheme()),
            images: Vec::new(),
        });
    }
    let prepared = prepare(dataset, images, model.config().image_size)?;
    let checkpoint = rng::sha256_hex(&model.to_checkpoint_bytes()?);
    let mut sampling = rng::substream(cfg.seed, "sampling/style");
    let own: Vec<StylePosterior> = if cfg.recipient_conditioned_style {
        Vec::new()
    } else {
        let mut out = Vec::with_capacity(n);
        for chunk in prepared.chunks(32) {
            let ims: Vec<&Image> = chunk.iter().map(|p| &p.image).collect();
            let lms: Vec<&LandmarkSet> = chunk.iter().map(|p| &p.landmarks).collect();
            out.extend(posteriors(model, &ims, &model.heatmap_batch(&lms)?)?);
        }
        out
    };

    let mut samples = Vec::with_capacity(n * cfg.k);
    let mut out_images = Vec::with_capacity(n * cfg.k);
    for (i, p) in prepared.iter().enumerate() {
        let heatmaps = model.heatmap_batch(&[&p.landmarks])?;
        let post: Vec<StylePosterior> = if cfg.recipient_conditioned_style {
            let ims: Vec<&Image> = donors[i].iter().map(|&j| &prepared[j].image).collect();
            let dims = heatmaps.dims().to_vec();
            let h = heatmaps.broadcast_as((cfg.k, dims[1], dims[2], dims[3]))?.contiguous()?;
            posteriors(model, &ims, &h)?
        } else {
            donors[i].iter().map(|&j| own[j].clone()).collect()
        };
        let codes: Vec<StyleCode> = post
            .iter()
            .map(|q| style_code(q, cfg.use_posterior_mean, &mut sampling))
            .collect();
        let (rendered, _) = render_styles(model, &codes, &heatmaps)?;
        let recipient = &dataset.samples()[i];
        for (&j, im) in donors[i].iter().zip(rendered) {
            let donor = &dataset.samples()[j];
            let id = synthetic_id(&recipient.id, &donor.id);
            let original = &images[i];
            out_images.push(to_original_frame(im, p, original.width(), original.height())?.quantized());
            samples.push(Sample {
                id: id.clone(),
                image_path: format!("synthetic/{id}.png"),
                landmarks: recipient.landmarks.clone(),
                bbox: recipient.bbox,
                attributes: None,
                synthetic: true,
                style_donor: Some(donor.id.clone()),
                recipient: Some(recipient.id.clone()),
                checkpoint: Some(checkpoint.clone()),
            });
        }
    }
    Ok(Augmented {
        dataset: Dataset::new(dataset.scheme(), samples)?,
        images: out_images,
    })
}
