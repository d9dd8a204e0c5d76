//! Detector evaluation, the style-count and loss-variant ablations, and a
//! linear probe of what the style code encodes.

use avsep_core::datasets::synth::{generate_synth_dataset, SynthFactors, SYNTH_LANDMARKS, SYNTH_SCHEME};
use avsep_core::datasets::Dataset;
use avsep_core::geometry::apply_transform;
use avsep_core::metrics::{nme, EvalReport, MetricConfig, NmeEntry, NormalizationRule};
use avsep_core::plot::{ExperimentTable, TableKind, TableRow};
use avsep_core::{Image, LandmarkSet};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{prepare, prepare_sample, Prepared};
use crate::detector::{predict, train_detector, DetectorConfig, DetectorModel, DetectorTrainConfig};
use crate::disentangler::{
    posterior_means, train_disentangler, DisentanglerConfig, DisentanglerModel, DisentanglerTrainConfig, LossVariant,
};
use crate::error::{Error, Result};
use crate::translation::{augment_dataset, AugmentConfig};

/// Detector predictions in each sample's original image frame.
pub fn predict_dataset(model: &DetectorModel, dataset: &Dataset, images: &[Image]) -> Result<Vec<LandmarkSet>> {
    if images.len() != dataset.n() {
        return Err(Error::shape(format!("{} images for {} samples", images.len(), dataset.n())));
    }
    dataset
        .samples()
        .iter()
        .zip(images)
        .map(|(s, im)| {
            let p = prepare_sample(s, im, model.config().image_size)?;
            let pred = predict(model, &p.image)?;
            Ok(apply_transform(&pred, &p.transform.inverse()?))
        })
        .collect()
}

/// Per-sample NME in the original frame; samples with a zero normalizer are
/// counted instead of failing the run.
pub fn evaluate(model: &DetectorModel, dataset: &Dataset, images: &[Image], metric: &MetricConfig) -> Result<EvalReport> {
    if dataset.scheme() != model.config().scheme {
        return Err(Error::Scheme {
            expected: model.config().scheme.to_string(),
            found: dataset.scheme().to_string(),
        });
    }
    let preds = predict_dataset(model, dataset, images)?;
    evaluate_predictions(dataset, &preds, metric)
}

pub fn evaluate_predictions(dataset: &Dataset, preds: &[LandmarkSet], metric: &MetricConfig) -> Result<EvalReport> {
    let rule = NormalizationRule::for_kind(metric.normalization, dataset.scheme())?;
    let mut entries = Vec::with_capacity(preds.len());
    let mut skipped = 0;
    for (s, pred) in dataset.samples().iter().zip(preds) {
        match nme(pred, &s.landmarks, &rule) {
            Ok(e) => entries.push(NmeEntry {
                id: s.id.clone(),
                nme: e,
                attributes: s.attributes.clone(),
            }),
            Err(avsep_core::Error::ZeroNormalizer(_)) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(EvalReport::aggregate(&entries, skipped, metric)?)
}

/// Labelled samples with their decoded images.
#[derive(Clone, Debug)]
pub struct Split {
    pub dataset: Dataset,
    pub images: Vec<Image>,
}

impl Split {
    pub fn prepared(&self, size: usize) -> Result<Vec<Prepared>> {
        prepare(&self.dataset, &self.images, size)
    }
}

/// Procedural faces split into a training and a test part, with the
/// generating factors of every sample.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train: Split,
    pub test: Split,
    pub train_factors: Vec<SynthFactors>,
    pub test_factors: Vec<SynthFactors>,
}

impl Benchmark {
    /// The first `n_train` of `n` generated faces train, the rest test.
    pub fn synthetic(n: usize, n_train: usize, image_size: usize, seed: u64) -> Result<Self> {
        if n_train == 0 || n_train >= n {
            return Err(Error::config(format!("n_train must be in 1..{n}, got {n_train}")));
        }
        let out = generate_synth_dataset(n, image_size, seed)?;
        let train: Vec<usize> = (0..n_train).collect();
        let test: Vec<usize> = (n_train..n).collect();
        Ok(Self {
            train: Split {
                dataset: out.dataset.subset(&train),
                images: out.images[..n_train].to_vec(),
            },
            test: Split {
                dataset: out.dataset.subset(&test),
                images: out.images[n_train..].to_vec(),
            },
            train_factors: out.factors[..n_train].to_vec(),
            test_factors: out.factors[n_train..].to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub disentangler: DisentanglerConfig,
    pub disentangler_train: DisentanglerTrainConfig,
    pub detector: DetectorConfig,
    pub detector_train: DetectorTrainConfig,
    /// `k` is used by the loss-variant ablation.
    pub augment: AugmentConfig,
    pub metric: MetricConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            disentangler: DisentanglerConfig::default(),
            disentangler_train: DisentanglerTrainConfig::default(),
            detector: DetectorConfig::default(),
            detector_train: DetectorTrainConfig::default(),
            augment: AugmentConfig::default(),
            metric: MetricConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    /// Small networks for 64×64 procedural faces; a full ablation fits in
    /// minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            disentangler: DisentanglerConfig {
                image_size: 64,
                image_channels: 3,
                landmarks: SYNTH_LANDMARKS,
                heatmap_size: 32,
                heatmap_sigma: 1.0,
                blocks: 3,
                base_channels: 8,
                max_channels: 32,
                style_dim: 16,
                style_map_size: 4,
            },
            disentangler_train: DisentanglerTrainConfig {
                epochs: 30,
                lr_start: 1e-3,
                lr_end: 1e-5,
                beta: 0.01,
                ..Default::default()
            },
            detector: DetectorConfig {
                image_size: 64,
                image_channels: 3,
                scheme: SYNTH_SCHEME,
                stem_stride: 1,
                stage_channels: vec![8, 16, 32, 32],
                blocks_per_stage: 1,
            },
            detector_train: DetectorTrainConfig {
                epochs: 100,
                ..Default::default()
            },
            augment: AugmentConfig {
                k: 4,
                ..Default::default()
            },
            metric: MetricConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

/// Outcome of one detector trained on real plus synthetic samples.
#[derive(Clone, Debug)]
pub struct StageTwo {
    pub report: EvalReport,
    pub n_synthetic: usize,
    pub final_loss: f64,
}

/// Augments `train` with `k` styles per image (k = 0 skips the generator),
/// trains a detector on the union and evaluates it on `test`.
pub fn run_stage_two(
    train: &Split,
    test: &Split,
    model: Option<&DisentanglerModel>,
    k: usize,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<StageTwo> {
    let size = cfg.detector.image_size;
    let real = train.prepared(size)?;
    let synthetic = if k == 0 {
        Vec::new()
    } else {
        let model = model.ok_or_else(|| Error::config("k > 0 needs a trained disentangler"))?;
        let aug = augment_dataset(
            model,
            &train.dataset,
            &train.images,
            &AugmentConfig {
                k,
                seed,
                ..cfg.augment.clone()
            },
        )?;
        prepare(&aug.dataset, &aug.images, size)?
    };
    let run = train_detector(&real, &synthetic, &cfg.detector, &cfg.detector_train, seed)?;
    let report = evaluate(&run.model, &test.dataset, &test.images, &cfg.metric)?;
    Ok(StageTwo {
        report,
        n_synthetic: synthetic.len(),
        final_loss: run.log.last().map_or(f64::NAN, |l| l.loss),
    })
}

pub fn train_variant(train: &Split, cfg: &ExperimentConfig, variant: LossVariant, seed: u64) -> Result<DisentanglerModel> {
    let samples = train.prepared(cfg.disentangler.image_size)?;
    let train = DisentanglerTrainConfig {
        variant,
        ..cfg.disentangler_train.clone()
    };
    Ok(train_disentangler(&samples, &cfg.disentangler, &train, seed)?.model)
}

/// Test NME for each `k`, one column per seed. Seeds vary the donors and the
/// detector; the disentangler is shared.
pub fn run_k_ablation(
    train: &Split,
    test: &Split,
    model: &DisentanglerModel,
    ks: &[usize],
    cfg: &ExperimentConfig,
) -> Result<ExperimentTable> {
    for &k in ks {
        AugmentConfig { k, ..cfg.augment.clone() }.validate(train.dataset.n())?;
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let nmes = cfg
            .seeds
            .iter()
            .map(|&seed| Ok(run_stage_two(train, test, Some(model), k, cfg, seed)?.report.overall.nme_mean))
            .collect::<Result<Vec<_>>>()?;
        rows.push(TableRow::new(k.to_string(), nmes));
    }
    Ok(ExperimentTable {
        kind: TableKind::StyleCount,
        seeds: cfg.seeds.clone(),
        rows,
    })
}

pub const BASELINE_LABEL: &str = "baseline";

/// A no-augmentation baseline row, then one row per loss variant. Each seed
/// trains its own disentangler per variant; `visit` sees every one of them
/// after its detector has been evaluated.
pub fn run_loss_ablation(
    train: &Split,
    test: &Split,
    variants: &[LossVariant],
    cfg: &ExperimentConfig,
    mut visit: impl FnMut(LossVariant, u64, &DisentanglerModel) -> Result<()>,
) -> Result<ExperimentTable> {
    cfg.augment.validate(train.dataset.n())?;
    let baseline = cfg
        .seeds
        .iter()
        .map(|&seed| Ok(run_stage_two(train, test, None, 0, cfg, seed)?.report.overall.nme_mean))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = vec![TableRow::new(BASELINE_LABEL, baseline)];
    for &variant in variants {
        let nmes = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let model = train_variant(train, cfg, variant, seed)?;
                let nme = run_stage_two(train, test, Some(&model), cfg.augment.k, cfg, seed)?.report.overall.nme_mean;
                visit(variant, seed, &model)?;
                Ok(nme)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(TableRow::new(variant.as_str(), nmes));
    }
    Ok(ExperimentTable {
        kind: TableKind::LossVariant,
        seeds: cfg.seeds.clone(),
        rows,
    })
}

/// Held-out R² of ridge regressions from the style code onto each factor
/// column, averaged over columns with non-zero variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub style_r2: f64,
    pub structure_r2: f64,
}

impl ProbeResult {
    pub fn gap(&self) -> f64 {
        self.style_r2 - self.structure_r2
    }
}

pub const PROBE_RIDGE: f64 = 1e-3;

/// Fits `targets` on `train_x` (with intercept) and scores R² per column on
/// the held-out rows. Columns constant on the held-out rows are skipped.
pub fn ridge_r2(
    train_x: &[Vec<f64>],
    train_y: &[Vec<f64>],
    test_x: &[Vec<f64>],
    test_y: &[Vec<f64>],
    ridge: f64,
) -> Result<Vec<f64>> {
    let n = train_x.len();
    if n == 0 || test_x.is_empty() || train_y.len() != n || test_y.len() != test_x.len() {
        return Err(Error::shape("probe needs matching, non-empty train and test rows"));
    }
    let d = train_x[0].len();
    let design = |rows: &[Vec<f64>]| DMatrix::from_fn(rows.len(), d + 1, |i, j| if j == d { 1.0 } else { rows[i][j] });
    let xtr = design(train_x);
    let xte = design(test_x);
    let mut gram = xtr.transpose() * &xtr;
    for j in 0..d {
        gram[(j, j)] += ridge * n as f64;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::shape("probe design matrix is singular"))?;
    let cols = train_y[0].len();
    let mut out = Vec::with_capacity(cols);
    for c in 0..cols {
        let y = DVector::from_fn(n, |i, _| train_y[i][c]);
        let w = chol.solve(&(xtr.transpose() * y));
        let pred = &xte * w;
        let truth = DVector::from_fn(test_y.len(), |i, _| test_y[i][c]);
        let mean = truth.mean();
        let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
        if ss_tot <= 1e-12 {
            continue;
        }
        let ss_res: f64 = truth.iter().zip(pred.iter()).map(|(t, p)| (t - p).powi(2)).sum();
        out.push(1.0 - ss_res / ss_tot);
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Posterior means of the training split fit the probes; the test split
/// scores them.
pub fn disentanglement_probe(model: &DisentanglerModel, bench: &Benchmark) -> Result<ProbeResult> {
    let size = model.config().image_size;
    let ztr = posterior_means(model, &bench.train.prepared(size)?)?;
    let zte = posterior_means(model, &bench.test.prepared(size)?)?;
    let style = |f: &[SynthFactors]| f.iter().map(|f| f.style.probe_vec()).collect::<Vec<_>>();
    let structure = |f: &[SynthFactors]| f.iter().map(|f| f.structure.to_vec()).collect::<Vec<_>>();
    let s = ridge_r2(&ztr, &style(&bench.train_factors), &zte, &style(&bench.test_factors), PROBE_RIDGE)?;
    let t = ridge_r2(&ztr, &structure(&bench.train_factors), &zte, &structure(&bench.test_factors), PROBE_RIDGE)?;
    Ok(ProbeResult {
        style_r2: mean(&s),
        structure_r2: mean(&t),
    })
}
