//! Run configuration: one TOML file, dotted-path overrides, strict keys.

use std::path::{Path, PathBuf};

use avsep_core::datasets::synth::SynthConfig;
use avsep_core::metrics::MetricConfig;
use avsep_model::detector::{DetectorConfig, DetectorTrainConfig};
use avsep_model::disentangler::{DisentanglerConfig, DisentanglerTrainConfig, LossVariant};
use avsep_model::evaluation::ExperimentConfig;
use avsep_model::perceptual::PerceptualMode;
use avsep_model::translation::AugmentConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n: usize,
    pub image_size: usize,
    pub channels: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            n: d.n,
            image_size: d.image_size,
            channels: d.channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    /// Styles per image for `ablate-k`.
    pub ks: Vec<usize>,
    /// Disentangler variants for `ablate-loss`, which uses `augment.k`.
    pub variants: Vec<LossVariant>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            ks: vec![0, 4, 8],
            variants: LossVariant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random substream.
    pub seed: u64,
    /// Only `true` is accepted: every stage is single-threaded and seeded.
    pub deterministic: bool,
    /// Output directory when `--out` is not given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub synth: SynthSection,
    pub disentangler: DisentanglerConfig,
    pub disentangler_train: DisentanglerTrainConfig,
    pub augment: AugmentConfig,
    pub detector: DetectorConfig,
    pub detector_train: DetectorTrainConfig,
    pub eval: MetricConfig,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    /// The desk preset: 64×64 procedural faces with ten landmarks.
    fn default() -> Self {
        let e = ExperimentConfig::desk();
        Self {
            seed: 0,
            deterministic: true,
            out: None,
            synth: SynthSection::default(),
            disentangler: e.disentangler,
            disentangler_train: e.disentangler_train,
            augment: e.augment,
            detector: e.detector,
            detector_train: e.detector_train,
            eval: e.metric,
            ablation: AblationSection {
                seeds: e.seeds,
                ..Default::default()
            },
        }
    }
}

impl RunConfig {
    /// Layers the file at `path` (if any), the `key=value` overrides and the
    /// seed over the defaults, then validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut table = match Value::try_from(RunConfig::default()).expect("defaults serialize") {
            Value::Table(t) => t,
            _ => unreachable!("a struct serializes to a table"),
        };
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let file = text
                .parse::<Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for o in overrides {
            merge(&mut table, parse_override(o)?);
        }
        if let Some(s) = seed {
            let s = i64::try_from(s).map_err(|_| CliError::Config(format!("seed {s} does not fit in a TOML integer")))?;
            table.insert("seed".into(), Value::Integer(s));
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !self.deterministic {
            return Err(CliError::Config(
                "deterministic = false is not supported: there is no non-deterministic execution mode".into(),
            ));
        }
        if let PerceptualMode::Pretrained { path } = &self.disentangler_train.perceptual.mode {
            if !path.is_file() {
                return Err(CliError::Config(format!(
                    "disentangler_train.perceptual.mode.pretrained.path: {} does not exist",
                    path.display()
                )));
            }
        }
        let model = |e: avsep_model::Error| CliError::Config(e.to_string());
        self.disentangler.validate().map_err(model)?;
        self.disentangler_train.validate().map_err(model)?;
        self.detector.validate().map_err(model)?;
        self.detector_train.validate().map_err(model)?;
        if self.ablation.seeds.is_empty() {
            return Err(CliError::Config("ablation.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            disentangler: self.disentangler.clone(),
            disentangler_train: self.disentangler_train.clone(),
            detector: self.detector.clone(),
            detector_train: self.detector_train.clone(),
            augment: self.augment.clone(),
            metric: self.eval.clone(),
            seeds: self.ablation.seeds.clone(),
        }
    }
}

/// Parses the right-hand side of `--set` as a TOML value, falling back to a
/// bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Recursive merge of `over` into `base`. A one-key base table that shares
/// no key with its replacement is an enum variant and is swapped whole.
pub fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => {
                if b.len() == 1 && !o.keys().any(|key| b.contains_key(key)) {
                    *b = o;
                } else {
                    merge(b, o);
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value` as the nested table `{a = {b = {c = value}}}`.
pub fn parse_override(assignment: &str) -> Result<Table, CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} has an empty segment")));
    }
    let mut value = parse_value(raw.trim());
    for p in parts.iter().rev() {
        value = Value::Table(Table::from_iter([(p.to_string(), value)]));
    }
    match value {
        Value::Table(t) => Ok(t),
        _ => unreachable!("at least one key segment"),
    }
}
