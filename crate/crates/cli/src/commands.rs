//! One function per subcommand. Each reads its inputs, runs a single
//! pipeline operation and writes into the staging directory.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use avsep_core::datasets::manifest::{load_manifest, manifest_to_string};
use avsep_core::datasets::synth::{generate, SynthConfig};
use avsep_core::datasets::Dataset;
use avsep_core::metrics::{ced_from_csv, ced_to_csv, EvalReport};
use avsep_core::plot::{ced_svg, table_svg, ExperimentTable};
use avsep_model::checkpoint;
use avsep_model::data::load_images;
use avsep_model::detector::{train_detector, DetectorModel};
use avsep_model::disentangler::{train_disentangler, DisentanglerModel};
use avsep_model::evaluation::{evaluate_predictions, predict_dataset, run_k_ablation, run_loss_ablation, Split};
use avsep_model::translation::{augment_dataset, AugmentConfig};
use candle_core::DType;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{input_record, InputRecord, Staging};
use crate::Command;

pub const MANIFEST: &str = "manifest.jsonl";
pub const FACTORS: &str = "factors.csv";
pub const DISENTANGLER_CHECKPOINT: &str = "disentangler.safetensors";
pub const DETECTOR_CHECKPOINT: &str = "detector.safetensors";
pub const TRAIN_LOG: &str = "log.jsonl";
pub const REPORT: &str = "report.jsonl";
pub const REPORT_TABLE: &str = "report.txt";
pub const CED: &str = "ced.csv";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const TABLE: &str = "table.jsonl";
pub const TABLE_TEXT: &str = "table.txt";

type Inputs = Vec<(String, InputRecord)>;

pub fn dispatch(command: &Command, cfg: &RunConfig, out: &Staging) -> Result<Inputs, CliError> {
    match command {
        Command::Synth => synth(cfg, out),
        Command::TrainDisentangler { data } => train_disentangler_cmd(cfg, data, out),
        Command::Augment { data, model } => augment(cfg, data, model, out),
        Command::TrainDetector { data, synthetic } => train_detector_cmd(cfg, data, synthetic.as_deref(), out),
        Command::Evaluate {
            data,
            model,
            predictions,
        } => evaluate(cfg, data, model.as_deref(), predictions.as_deref(), out),
        Command::AblateK { data, test, model } => ablate_k(cfg, data, test, model, out),
        Command::AblateLoss { data, test } => ablate_loss(cfg, data, test, out),
        Command::Plot { inputs } => plot(inputs, out),
    }
}

fn require(path: &Path, producer: &'static str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        })
    }
}

fn record(label: &str, path: &Path) -> Result<(String, InputRecord), CliError> {
    Ok((label.to_string(), input_record(path)?))
}

fn load_dataset(dir: &Path, producer: &'static str) -> Result<Dataset, CliError> {
    let path = dir.join(MANIFEST);
    require(&path, producer)?;
    Ok(load_manifest(&path)?)
}

/// Manifest plus decoded images; image paths are relative to `dir`.
fn load_split(dir: &Path, producer: &'static str) -> Result<Split, CliError> {
    let dataset = load_dataset(dir, producer)?;
    let images = load_images(&dataset, dir)?;
    Ok(Split { dataset, images })
}

fn load_disentangler(dir: &Path) -> Result<DisentanglerModel, CliError> {
    let path = dir.join(DISENTANGLER_CHECKPOINT);
    require(&path, "train-disentangler")?;
    Ok(DisentanglerModel::from_checkpoint(&checkpoint::load(&path)?, DType::F32)?)
}

fn load_detector(dir: &Path) -> Result<DetectorModel, CliError> {
    let path = dir.join(DETECTOR_CHECKPOINT);
    require(&path, "train-detector")?;
    Ok(DetectorModel::from_checkpoint(&checkpoint::load(&path)?, DType::F32)?)
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
        .collect()
}

fn write_dataset(out: &Staging, split: &Split) -> Result<(), CliError> {
    out.write(MANIFEST, manifest_to_string(&split.dataset))?;
    for (s, im) in split.dataset.samples().iter().zip(&split.images) {
        out.write(&s.image_path, im.encode_png()?)?;
    }
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Staging) -> Result<Inputs, CliError> {
    let data = generate(&SynthConfig {
        n: cfg.synth.n,
        image_size: cfg.synth.image_size,
        channels: cfg.synth.channels,
        seed: cfg.seed,
    })?;
    out.write(FACTORS, data.factors_csv())?;
    write_dataset(
        out,
        &Split {
            dataset: data.dataset,
            images: data.images,
        },
    )?;
    Ok(Vec::new())
}

fn check_landmarks(expected: usize, dataset: &Dataset, key: &str) -> Result<(), CliError> {
    let found = dataset.scheme().count();
    if expected != found {
        return Err(CliError::Config(format!(
            "{key} = {expected} but the dataset uses {} ({found} landmarks)",
            dataset.scheme()
        )));
    }
    Ok(())
}

fn train_disentangler_cmd(cfg: &RunConfig, data: &Path, out: &Staging) -> Result<Inputs, CliError> {
    let split = load_split(data, "synth")?;
    check_landmarks(cfg.disentangler.landmarks, &split.dataset, "disentangler.landmarks")?;
    let samples = split.prepared(cfg.disentangler.image_size)?;
    let run = train_disentangler(&samples, &cfg.disentangler, &cfg.disentangler_train, cfg.seed)?;
    out.write(DISENTANGLER_CHECKPOINT, run.checkpoint_bytes()?)?;
    out.write(TRAIN_LOG, jsonl(&run.log))?;
    Ok(vec![record("data", data)?])
}

fn augment(cfg: &RunConfig, data: &Path, model_dir: &Path, out: &Staging) -> Result<Inputs, CliError> {
    let split = load_split(data, "synth")?;
    let model = load_disentangler(model_dir)?;
    let aug = augment_dataset(
        &model,
        &split.dataset,
        &split.images,
        &AugmentConfig {
            seed: cfg.seed,
            ..cfg.augment.clone()
        },
    )?;
    write_dataset(
        out,
        &Split {
            dataset: aug.dataset,
            images: aug.images,
        },
    )?;
    Ok(vec![
        record("data", data)?,
        record("model", &model_dir.join(DISENTANGLER_CHECKPOINT))?,
    ])
}

fn train_detector_cmd(cfg: &RunConfig, data: &Path, synthetic: Option<&Path>, out: &Staging) -> Result<Inputs, CliError> {
    let size = cfg.detector.image_size;
    let real = load_split(data, "synth")?;
    let mut inputs = vec![record("data", data)?];
    let synthetic = match synthetic {
        Some(dir) => {
            let split = load_split(dir, "augment")?;
            inputs.push(record("synthetic", dir)?);
            split.prepared(size)?
        }
        None => Vec::new(),
    };
    let run = train_detector(&real.prepared(size)?, &synthetic, &cfg.detector, &cfg.detector_train, cfg.seed)?;
    out.write(DETECTOR_CHECKPOINT, run.checkpoint_bytes()?)?;
    out.write(TRAIN_LOG, jsonl(&run.log))?;
    Ok(inputs)
}

/// Predictions in `file`, reordered to follow `dataset`.
fn predictions_for(dataset: &Dataset, file: &Path) -> Result<Vec<avsep_core::LandmarkSet>, CliError> {
    require(file, "evaluate")?;
    let preds = load_manifest(file)?;
    let by_id: HashMap<&str, &avsep_core::LandmarkSet> =
        preds.samples().iter().map(|s| (s.id.as_str(), &s.landmarks)).collect();
    dataset
        .samples()
        .iter()
        .map(|s| {
            by_id
                .get(s.id.as_str())
                .map(|l| (*l).clone())
                .ok_or_else(|| CliError::Config(format!("{} has no prediction for sample {}", file.display(), s.id)))
        })
        .collect()
}

fn write_report(out: &Staging, report: &EvalReport) -> Result<(), CliError> {
    out.write(REPORT, report.to_records())?;
    out.write(REPORT_TABLE, report.to_table())?;
    out.write(CED, ced_to_csv(&report.overall.ced))
}

fn evaluate(
    cfg: &RunConfig,
    data: &Path,
    model_dir: Option<&Path>,
    predictions: Option<&Path>,
    out: &Staging,
) -> Result<Inputs, CliError> {
    let mut inputs = vec![record("data", data)?];
    let (dataset, preds) = match (model_dir, predictions) {
        (Some(dir), _) => {
            let split = load_split(data, "synth")?;
            let model = load_detector(dir)?;
            let preds = predict_dataset(&model, &split.dataset, &split.images)?;
            let mut samples = split.dataset.samples().to_vec();
            for (s, p) in samples.iter_mut().zip(&preds) {
                s.landmarks = p.clone();
            }
            out.write(PREDICTIONS, manifest_to_string(&Dataset::new(split.dataset.scheme(), samples)?))?;
            inputs.push(record("model", &dir.join(DETECTOR_CHECKPOINT))?);
            (split.dataset, preds)
        }
        (None, Some(file)) => {
            let dataset = load_dataset(data, "synth")?;
            let preds = predictions_for(&dataset, file)?;
            inputs.push(record("predictions", file)?);
            (dataset, preds)
        }
        (None, None) => return Err(CliError::Usage("evaluate needs --model or --predictions".into())),
    };
    write_report(out, &evaluate_predictions(&dataset, &preds, &cfg.eval)?)?;
    Ok(inputs)
}

fn write_table(out: &Staging, table: &ExperimentTable) -> Result<(), CliError> {
    out.write(TABLE, table.to_jsonl())?;
    out.write(TABLE_TEXT, table.to_text())
}

fn ablate_k(cfg: &RunConfig, data: &Path, test: &Path, model_dir: &Path, out: &Staging) -> Result<Inputs, CliError> {
    let train = load_split(data, "synth")?;
    let test_split = load_split(test, "synth")?;
    let model = load_disentangler(model_dir)?;
    let table = run_k_ablation(&train, &test_split, &model, &cfg.ablation.ks, &cfg.experiment())?;
    write_table(out, &table)?;
    Ok(vec![
        record("data", data)?,
        record("test", test)?,
        record("model", &model_dir.join(DISENTANGLER_CHECKPOINT))?,
    ])
}

fn ablate_loss(cfg: &RunConfig, data: &Path, test: &Path, out: &Staging) -> Result<Inputs, CliError> {
    let train = load_split(data, "synth")?;
    let test_split = load_split(test, "synth")?;
    let table = run_loss_ablation(&train, &test_split, &cfg.ablation.variants, &cfg.experiment(), |_, _, _| Ok(()))?;
    write_table(out, &table)?;
    Ok(vec![record("data", data)?, record("test", test)?])
}

enum PlotInput {
    Table(PathBuf),
    Ced(PathBuf),
}

fn classify(path: &Path) -> Result<PlotInput, CliError> {
    const PRODUCERS: &str = "evaluate, ablate-k or ablate-loss";
    if path.is_dir() {
        for (name, make) in [(TABLE, PlotInput::Table as fn(PathBuf) -> PlotInput), (CED, PlotInput::Ced)] {
            let file = path.join(name);
            if file.is_file() {
                return Ok(make(file));
            }
        }
        return Err(CliError::MissingArtifact {
            path: path.join(TABLE),
            producer: PRODUCERS,
        });
    }
    require(path, PRODUCERS)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => Ok(PlotInput::Table(path.to_path_buf())),
        Some("csv") => Ok(PlotInput::Ced(path.to_path_buf())),
        _ => Err(CliError::Usage(format!(
            "{}: expected a {TABLE} or {CED} file",
            path.display()
        ))),
    }
}

/// Name of the run that produced `file`: its directory, or its stem.
fn run_name(file: &Path) -> String {
    file.parent()
        .and_then(|p| p.file_name())
        .or_else(|| file.file_stem())
        .map_or_else(|| "input".into(), |n| n.to_string_lossy().into_owned())
}

fn unique(name: String, taken: &mut BTreeMap<String, usize>) -> String {
    let n = taken.entry(name.clone()).or_insert(0);
    *n += 1;
    if *n == 1 {
        name
    } else {
        format!("{name}-{n}")
    }
}

fn plot(inputs: &[PathBuf], out: &Staging) -> Result<Inputs, CliError> {
    let mut records = Vec::new();
    let mut curves = Vec::new();
    let mut taken = BTreeMap::from([("ced".to_string(), 1)]);
    for (i, input) in inputs.iter().enumerate() {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| CliError::io(p, e));
        match classify(input)? {
            PlotInput::Table(file) => {
                let table = ExperimentTable::from_jsonl(&read(&file)?)?;
                let name = unique(run_name(&file), &mut taken);
                out.write(&format!("{name}.svg"), table_svg(&table))?;
                records.push(record(&format!("input{i}"), &file)?);
            }
            PlotInput::Ced(file) => {
                curves.push((unique(run_name(&file), &mut taken), ced_from_csv(&read(&file)?)?));
                records.push(record(&format!("input{i}"), &file)?);
            }
        }
    }
    if !curves.is_empty() {
        out.write("ced.svg", ced_svg(&curves))?;
    }
    Ok(records)
}
