//! Atomically created output directories and their provenance records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use avsep_core::rng::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const PROVENANCE: &str = "provenance.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    /// Digest of the file, or of the sorted file listing for a directory.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub deterministic: bool,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, InputRecord>,
    /// Every file written, relative to the output directory.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

impl Provenance {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(PROVENANCE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("walk stays under root").to_path_buf());
        }
    }
    Ok(())
}

/// SHA-256 of every file under `dir` except a top-level provenance record,
/// keyed by `/`-separated relative path.
pub fn file_hashes(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut out = BTreeMap::new();
    for rel in files {
        if rel == Path::new(PROVENANCE) {
            continue;
        }
        let path = dir.join(&rel);
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        out.insert(key, sha256_hex(&bytes));
    }
    Ok(out)
}

pub fn input_record(path: &Path) -> Result<InputRecord, CliError> {
    let sha256 = if path.is_dir() {
        let listing: String = file_hashes(path)?
            .iter()
            .map(|(k, v)| format!("{v}  {k}\n"))
            .collect();
        sha256_hex(listing.as_bytes())
    } else {
        sha256_hex(&std::fs::read(path).map_err(|e| CliError::io(path, e))?)
    };
    Ok(InputRecord {
        path: path.to_path_buf(),
        sha256,
    })
}

/// A hidden sibling directory that becomes `target` in one rename once every
/// file is written. Dropped without `commit`, it is removed.
pub struct Staging {
    target: PathBuf,
    dir: PathBuf,
    started: Instant,
    committed: bool,
}

impl Staging {
    pub fn create(target: &Path) -> Result<Self, CliError> {
        if target.exists() {
            return Err(CliError::OutputExists(target.to_path_buf()));
        }
        let name = target
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("--out {} has no final component", target.display())))?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&parent).map_err(|e| CliError::io(&parent, e))?;
        let dir = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        std::fs::create_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self {
            target: target.to_path_buf(),
            dir,
            started: Instant::now(),
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))
    }

    /// Fills in outputs and wall time, writes the provenance record and
    /// moves the directory into place.
    pub fn commit(mut self, mut provenance: Provenance) -> Result<PathBuf, CliError> {
        provenance.outputs = file_hashes(&self.dir)?;
        provenance.wall_time_s = self.started.elapsed().as_secs_f64();
        let json = serde_json::to_string_pretty(&provenance).expect("provenance serializes");
        self.write(PROVENANCE, json + "\n")?;
        if self.target.exists() {
            return Err(CliError::OutputExists(self.target.clone()));
        }
        std::fs::rename(&self.dir, &self.target).map_err(|e| {
            if self.target.exists() {
                CliError::OutputExists(self.target.clone())
            } else {
                CliError::io(&self.target, e)
            }
        })?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = std::fs::remove_dir_all(&self.dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn provenance() -> Provenance {
        Provenance {
            command: "test".into(),
            args: vec![],
            version: "0".into(),
            seed: 0,
            deterministic: true,
            config_sha256: String::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn commit_moves_everything_into_place() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("run");
        let s = Staging::create(&target).unwrap();
        s.write("a/b.txt", "hello").unwrap();
        assert!(!target.exists());
        s.commit(provenance()).unwrap();
        assert_eq!(std::fs::read_to_string(target.join("a/b.txt")).unwrap(), "hello");
        let p = Provenance::load(&target).unwrap();
        assert_eq!(p.outputs.keys().collect::<Vec<_>>(), ["a/b.txt"]);
        assert_eq!(std::fs::read_dir(root.path()).unwrap().count(), 1);
    }

    #[test]
    fn existing_target_is_refused_and_abandoned_staging_is_removed() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("run");
        std::fs::create_dir(&target).unwrap();
        assert!(matches!(Staging::create(&target), Err(CliError::OutputExists(_))));
        let other = root.path().join("other");
        let s = Staging::create(&other).unwrap();
        s.write("x", "1").unwrap();
        drop(s);
        assert_eq!(std::fs::read_dir(root.path()).unwrap().count(), 1);
    }

    #[test]
    fn directory_digest_ignores_provenance_but_not_content() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("f"), "1").unwrap();
        let a = input_record(dir.path()).unwrap().sha256;
        std::fs::write(dir.path().join(PROVENANCE), "{}").unwrap();
        assert_eq!(input_record(dir.path()).unwrap().sha256, a);
        std::fs::write(dir.path().join("f"), "2").unwrap();
        assert_ne!(input_record(dir.path()).unwrap().sha256, a);
    }
}
