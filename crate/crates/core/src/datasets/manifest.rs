//! JSON-lines dataset manifests.
//!
//! The first line is a header naming the format, landmark scheme and record
//! count; every following line is one self-contained sample record. Floats
//! are written in shortest round-trip form, so a load after a save returns
//! the same dataset bit for bit.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{Attribute, Dataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, LandmarkScheme, LandmarkSet};

pub const MANIFEST_FORMAT: &str = "avsep-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    scheme: LandmarkScheme,
    n: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    image_path: String,
    scheme: LandmarkScheme,
    landmarks: Vec<f64>,
    bbox: [f64; 4],
    attributes: Option<Vec<Attribute>>,
    synthetic: bool,
    style_donor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    recipient: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    checkpoint: Option<String>,
}

pub fn manifest_to_string(dataset: &Dataset) -> String {
    let header = Header {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        scheme: dataset.scheme(),
        n: dataset.n(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for s in dataset.samples() {
        let rec = Record {
            id: s.id.clone(),
            image_path: s.image_path.clone(),
            scheme: s.landmarks.scheme(),
            landmarks: s.landmarks.to_flat(),
            bbox: s.bbox.to_array(),
            attributes: s.attributes.as_ref().map(|a| a.iter().copied().collect()),
            synthetic: s.synthetic,
            style_donor: s.style_donor.clone(),
            recipient: s.recipient.clone(),
            checkpoint: s.checkpoint.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses a manifest. Record indices in errors are 0-based over sample
/// records; the header is index `-1` in messages.
pub fn manifest_from_str(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header_line = lines.next().ok_or_else(|| Error::Manifest {
        index: 0,
        msg: "empty manifest: missing header".into(),
    })?;
    let header: Header = serde_json::from_str(header_line).map_err(|e| Error::Manifest {
        index: 0,
        msg: format!("bad header: {e}"),
    })?;
    if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
        return Err(Error::Manifest {
            index: 0,
            msg: format!("unsupported manifest {} v{}", header.format, header.version),
        });
    }
    let mut samples = Vec::with_capacity(header.n);
    for (index, line) in lines.enumerate() {
        let bad = |msg: String| Error::Manifest { index, msg };
        let rec: Record = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if rec.scheme != header.scheme {
            return Err(bad(format!("scheme {} differs from header {}", rec.scheme, header.scheme)));
        }
        let landmarks = LandmarkSet::from_flat(rec.scheme, &rec.landmarks).map_err(|e| bad(e.to_string()))?;
        let [x0, y0, x1, y1] = rec.bbox;
        let bbox = BoundingBox::new(x0, y0, x1, y1).map_err(|e| bad(e.to_string()))?;
        let sample = Sample {
            id: rec.id,
            image_path: rec.image_path,
            landmarks,
            bbox,
            attributes: rec.attributes.map(|a| a.into_iter().collect::<BTreeSet<_>>()),
            synthetic: rec.synthetic,
            style_donor: rec.style_donor,
            recipient: rec.recipient,
            checkpoint: rec.checkpoint,
        };
        sample.validate().map_err(|e| bad(e.to_string()))?;
        samples.push(sample);
    }
    if samples.len() != header.n {
        return Err(Error::Manifest {
            index: samples.len(),
            msg: format!("header declares {} records, found {}", header.n, samples.len()),
        });
    }
    Dataset::new(header.scheme, samples)
}

pub fn save_manifest(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, manifest_to_string(dataset)).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    manifest_from_str(&text)
}
