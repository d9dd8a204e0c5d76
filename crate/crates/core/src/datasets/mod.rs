//! Annotated face datasets and their on-disk formats.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, LandmarkScheme, LandmarkSet};

pub mod manifest;
pub mod pts;
pub mod synth;
pub mod wflw;

pub use manifest::{load_manifest, save_manifest};
pub use pts::{parse_pts, serialize_pts};
pub use synth::{generate_synth_dataset, SynthConfig, SynthFactors, SynthOutput};
pub use wflw::{parse_wflw_annotations, parse_wflw_line, serialize_wflw_line};

/// WFLW attribute flags, in the dataset's published column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Pose,
    Expression,
    Illumination,
    Makeup,
    Occlusion,
    Blur,
}

impl Attribute {
    pub const ALL: [Attribute; 6] = [
        Attribute::Pose,
        Attribute::Expression,
        Attribute::Illumination,
        Attribute::Makeup,
        Attribute::Occlusion,
        Attribute::Blur,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Attribute::Pose => "pose",
            Attribute::Expression => "expression",
            Attribute::Illumination => "illumination",
            Attribute::Makeup => "makeup",
            Attribute::Occlusion => "occlusion",
            Attribute::Blur => "blur",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown attribute {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Unique within its dataset; referenced by `style_donor` and `recipient`.
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub image_path: String,
    pub landmarks: LandmarkSet,
    pub bbox: BoundingBox,
    /// `None` when the source carries no attribute annotation.
    pub attributes: Option<BTreeSet<Attribute>>,
    pub synthetic: bool,
    pub style_donor: Option<String>,
    /// For synthetic samples: the sample whose structure was rendered.
    pub recipient: Option<String>,
    /// For synthetic samples: hash of the generator checkpoint.
    pub checkpoint: Option<String>,
}

impl Sample {
    pub fn real(id: impl Into<String>, image_path: impl Into<String>, landmarks: LandmarkSet, bbox: BoundingBox) -> Self {
        Self {
            id: id.into(),
            image_path: image_path.into(),
            landmarks,
            bbox,
            attributes: None,
            synthetic: false,
            style_donor: None,
            recipient: None,
            checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if self.synthetic != self.style_donor.is_some() {
            return Err(Error::invalid(format!(
                "sample {}: style_donor must be set exactly when the sample is synthetic",
                self.id
            )));
        }
        Ok(())
    }

    pub fn has_attribute(&self, a: Attribute) -> bool {
        self.attributes.as_ref().is_some_and(|s| s.contains(&a))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    scheme: LandmarkScheme,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(scheme: LandmarkScheme, samples: Vec<Sample>) -> Result<Self> {
        let mut ids = std::collections::HashSet::new();
        for s in &samples {
            if s.landmarks.scheme() != scheme {
                return Err(Error::invalid(format!(
                    "sample {} uses scheme {} in a {scheme} dataset",
                    s.id,
                    s.landmarks.scheme()
                )));
            }
            s.validate()?;
            if !ids.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self { scheme, samples })
    }

    pub fn empty(scheme: LandmarkScheme) -> Self {
        Self {
            scheme,
            samples: Vec::new(),
        }
    }

    pub fn scheme(&self) -> LandmarkScheme {
        self.scheme
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            scheme: self.scheme,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Concatenation of two datasets with one scheme.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Dataset::new(self.scheme, samples)
    }
}

pub(crate) fn format_decimal(v: f64, decimals: usize) -> String {
    let fixed = format!("{v:.decimals$}");
    if fixed.parse::<f64>().ok() == Some(v) {
        fixed
    } else {
        format!("{v}")
    }
}
