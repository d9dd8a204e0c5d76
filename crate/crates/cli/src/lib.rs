//! The `avsep` command line: each subcommand runs one pipeline stage and
//! writes a fresh output directory with a provenance record.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use avsep_core::rng::sha256_hex;
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::RunConfig;
pub use error::CliError;
use output::{Provenance, Staging};

#[derive(Debug, Parser)]
#[command(name = "avsep", version, about = "Landmark-preserving style augmentation for face alignment")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set detector_train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Root seed; replaces `seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; must not exist yet.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate procedural faces with known style and structure factors.
    Synth,
    /// Train the style/structure disentangler on a dataset.
    TrainDisentangler {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Render every image with the styles of k other images.
    Augment {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output of `train-disentangler`.
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
    },
    /// Train the landmark detector on real plus optional synthetic samples.
    TrainDetector {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output of `augment`.
        #[arg(long, value_name = "DIR")]
        synthetic: Option<PathBuf>,
    },
    /// Score a detector, or a predictions manifest, against ground truth.
    Evaluate {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output of `train-detector`.
        #[arg(long, value_name = "DIR", required_unless_present = "predictions")]
        model: Option<PathBuf>,
        /// Manifest whose landmarks are predictions, matched by sample id.
        #[arg(long, value_name = "FILE", conflicts_with = "model")]
        predictions: Option<PathBuf>,
    },
    /// Test NME against the number of styles per image.
    AblateK {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        test: PathBuf,
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
    },
    /// Test NME for each disentangler loss variant and a no-augmentation baseline.
    AblateLoss {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        test: PathBuf,
    },
    /// Draw tables and CED curves as SVG.
    Plot {
        /// `table.jsonl` or `ced.csv` files, or directories holding them.
        #[arg(long = "input", value_name = "PATH", required = true)]
        inputs: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::TrainDisentangler { .. } => "train-disentangler",
            Command::Augment { .. } => "augment",
            Command::TrainDetector { .. } => "train-detector",
            Command::Evaluate { .. } => "evaluate",
            Command::AblateK { .. } => "ablate-k",
            Command::AblateLoss { .. } => "ablate-loss",
            Command::Plot { .. } => "plot",
        }
    }
}

pub const CONFIG_FILE: &str = "config.toml";

/// Parses `argv` and runs the subcommand. Returns the output directory, or
/// `None` when only help or version text was printed.
pub fn run<I, T>(argv: I) -> Result<Option<PathBuf>, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(None);
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string().trim().to_string())),
    };
    let cfg = RunConfig::load(cli.common.config.as_deref(), &cli.common.set, cli.common.seed)?;
    let out = cli
        .common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `out` in the config".into()))?;
    let staging = Staging::create(&out)?;
    let inputs = commands::dispatch(&cli.command, &cfg, &staging)?;
    let toml = cfg.to_toml();
    staging.write(CONFIG_FILE, &toml)?;
    let provenance = Provenance {
        command: cli.command.name().into(),
        args: argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        deterministic: cfg.deterministic,
        config_sha256: sha256_hex(toml.as_bytes()),
        inputs: inputs.into_iter().collect::<BTreeMap<_, _>>(),
        outputs: BTreeMap::new(),
        wall_time_s: 0.0,
    };
    staging.commit(provenance).map(Some)
}
