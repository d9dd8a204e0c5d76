use std::path::{Path, PathBuf};

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path} is missing; produce it with `avsep {producer}`")]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("output directory {0} already exists")]
    OutputExists(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] avsep_core::Error),
    #[error(transparent)]
    Model(#[from] avsep_model::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::OutputExists(_) => "output_exists",
            CliError::Io { .. } => "io",
            CliError::Core(_) => "data",
            CliError::Model(_) => "model",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } | CliError::OutputExists(_) => 3,
            _ => 1,
        }
    }

    /// Single-line JSON record for stderr.
    pub fn to_json(&self) -> String {
        let mut rec = json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        match self {
            CliError::MissingArtifact { path, producer } => {
                rec["path"] = json!(path);
                rec["producer"] = json!(producer);
            }
            CliError::OutputExists(path) | CliError::Io { path, .. } => rec["path"] = json!(path),
            _ => {}
        }
        rec.to_string()
    }
}
