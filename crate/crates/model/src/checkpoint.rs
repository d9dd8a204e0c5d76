//! Self-describing checkpoint container.
//!
//! A checkpoint is a safetensors file. Tensors are stored under
//! `param/<name>` and, when optimizer state is kept, `adam/m/<name>` and
//! `adam/v/<name>`. A single metadata entry holds a JSON [`CheckpointMeta`]
//! with the format tag, architecture config, epoch counter and RNG state.
//! With one metadata key the header is byte-stable, so equal models give
//! equal file hashes.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const DISENTANGLER_FORMAT: &str = "avsep-disentangler/1";
pub const DETECTOR_FORMAT: &str = "avsep-detector/1";
const META_KEY: &str = "avsep";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub config: serde_json::Value,
    pub epoch: usize,
    pub adam: Option<AdamMeta>,
    /// Serialized state of the training RNG, for resuming.
    pub rng: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamMeta {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn params(&self) -> HashMap<String, Tensor> {
        self.prefixed("param/")
    }

    pub fn restore_adam(&self, ps: &ParamStore) -> Result<Option<Adam>> {
        match &self.meta.adam {
            None => Ok(None),
            Some(m) => Ok(Some(Adam::restore(m.config, ps, m.step, &self.prefixed("adam/"))?)),
        }
    }

    fn prefixed(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    pub fn expect_format(&self, format: &str) -> Result<()> {
        if self.meta.format != format {
            return Err(Error::config(format!(
                "checkpoint has format {}, expected {format}",
                self.meta.format
            )));
        }
        Ok(())
    }
}

pub fn to_bytes(meta: &CheckpointMeta, ps: &ParamStore, adam: Option<&Adam>) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Tensor)> = ps
        .params()
        .iter()
        .map(|(n, v)| (format!("param/{n}"), v.as_tensor().detach()))
        .collect();
    if let Some(adam) = adam {
        tensors.extend(adam.state(ps).into_iter().map(|(n, t)| (format!("adam/{n}"), t)));
    }
    let json = serde_json::to_string(meta).map_err(|e| Error::config(e.to_string()))?;
    let info = Some(HashMap::from([(META_KEY.to_string(), json)]));
    safetensors::serialize(tensors, &info).map_err(|e| Error::config(format!("serialize checkpoint: {e}")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Checkpoint {
        path: "<memory>".into(),
        msg,
    };
    let (_, header) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| bad("missing checkpoint metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
    let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
    Ok(Checkpoint { meta, tensors })
}

pub fn save(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint { msg, .. } => Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use rand::SeedableRng;

    fn store(seed: u64) -> ParamStore {
        let mut ps = ParamStore::new(DType::F32);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ps.normal("a", &[2, 3], 1.0, &mut rng).unwrap();
        ps.normal("b", &[4], 1.0, &mut rng).unwrap();
        ps
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            format: DETECTOR_FORMAT.into(),
            config: serde_json::json!({"width": 4}),
            epoch: 3,
            adam: Some(AdamMeta {
                config: AdamConfig::default(),
                step: 0,
            }),
            rng: None,
        }
    }

    #[test]
    fn round_trip_restores_parameters_and_optimizer() {
        let ps = store(1);
        let adam = Adam::new(AdamConfig::default(), &ps).unwrap();
        let bytes = to_bytes(&meta(), &ps, Some(&adam)).unwrap();
        assert_eq!(bytes, to_bytes(&meta(), &ps, Some(&adam)).unwrap());
        let ck = from_bytes(&bytes).unwrap();
        assert_eq!(ck.meta, meta());
        ck.expect_format(DETECTOR_FORMAT).unwrap();
        assert!(ck.expect_format(DISENTANGLER_FORMAT).is_err());
        let other = store(2);
        other.load(&ck.params()).unwrap();
        for ((_, x), (_, y)) in ps.params().iter().zip(other.params()) {
            assert_eq!(
                x.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                y.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
        assert!(ck.restore_adam(&other).unwrap().is_some());
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(from_bytes(b"not a checkpoint").is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
