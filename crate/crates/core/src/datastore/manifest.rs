use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::feature_file::{read_feature_file, LayerFeatureTensor};
use crate::error::{Error, Result};

pub const MIN_THRESHOLD_DB: f64 = -10.0;
pub const MAX_THRESHOLD_DB: f64 = 120.0;
pub const MAX_SCORE: f64 = 100.0;

/// Attributes used to rank foundation models against each other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfmAttributes {
    /// English ASR word error rate, percent.
    pub asr_wer: f64,
    pub data_hours: f64,
    /// Encoder architecture proposal date, `YYYY-MM`.
    pub arch_date: String,
    pub train_task_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfmDescriptor {
    pub name: String,
    pub layers: usize,
    pub channels: usize,
    pub attributes: SfmAttributes,
}

impl SfmDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.layers == 0 || self.channels == 0 {
            return Err(Error::Manifest(format!(
                "sfm descriptor needs a name and positive dims, got {:?} L={} C={}",
                self.name, self.layers, self.channels
            )));
        }
        Ok(())
    }
}

/// Per-ear hearing thresholds in dB HL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audiogram {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl Audiogram {
    pub fn ear(&self, ear: usize) -> &[f64] {
        if ear == 0 {
            &self.left
        } else {
            &self.right
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            left: self.right.clone(),
            right: self.left.clone(),
        }
    }

    pub fn validate(&self, frequencies: usize) -> Result<()> {
        for (side, v) in [("left", &self.left), ("right", &self.right)] {
            if v.len() != frequencies {
                return Err(Error::Manifest(format!(
                    "{side} audiogram has {} thresholds, grid has {frequencies}",
                    v.len()
                )));
            }
            if let Some(t) = v
                .iter()
                .find(|t| !(MIN_THRESHOLD_DB..=MAX_THRESHOLD_DB).contains(*t))
            {
                return Err(Error::Manifest(format!(
                    "{side} threshold {t} dB HL outside [{MIN_THRESHOLD_DB}, {MAX_THRESHOLD_DB}]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub listener_id: String,
    pub system_id: String,
    /// Intelligibility, percent words correct.
    pub score: f64,
    /// Relative to the manifest's directory.
    pub feature_path: String,
    pub audiogram: Audiogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sfm: SfmDescriptor,
    pub audiogram_frequencies: Vec<f64>,
    pub samples: Vec<Sample>,
}

impl Manifest {
    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        self.sfm.validate()?;
        if self.audiogram_frequencies.is_empty() {
            return Err(Error::Manifest("empty audiogram frequency grid".into()));
        }
        let f = self.audiogram_frequencies.len();
        let mut ids = HashSet::new();
        for s in &self.samples {
            let ctx = |e: Error| e.context(format!("sample {:?}", s.sample_id));
            if s.sample_id.is_empty() || !ids.insert(s.sample_id.as_str()) {
                return Err(Error::Manifest(format!("empty or duplicate sample id {:?}", s.sample_id)));
            }
            if s.listener_id.is_empty() {
                return Err(ctx(Error::Manifest("empty listener id".into())));
            }
            if !(0.0..=MAX_SCORE).contains(&s.score) {
                return Err(ctx(Error::Manifest(format!("score {} outside [0, 100]", s.score))));
            }
            s.audiogram.validate(f).map_err(ctx)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(format!("manifest {}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn frequencies(&self) -> usize {
        self.audiogram_frequencies.len()
    }
}

/// A validated manifest with every feature file loaded and checked against
/// the descriptor.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub root: PathBuf,
    pub features: Vec<LayerFeatureTensor>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Self::from_manifest(manifest, root)
    }

    pub fn from_manifest(manifest: Manifest, root: PathBuf) -> Result<Self> {
        manifest.validate()?;
        let mut features = Vec::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            let t = read_feature_file(&root.join(&s.feature_path))
                .map_err(|e| e.context(format!("sample {:?}", s.sample_id)))?;
            if t.layers() != manifest.sfm.layers || t.channels() != manifest.sfm.channels {
                return Err(Error::Shape(format!(
                    "sample {:?} has L={} C={}, descriptor {:?} declares L={} C={}",
                    s.sample_id,
                    t.layers(),
                    t.channels(),
                    manifest.sfm.name,
                    manifest.sfm.layers,
                    manifest.sfm.channels
                )));
            }
            features.push(t);
        }
        Ok(Self {
            manifest,
            root,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.manifest.samples
    }

    pub fn index_of(&self, sample_id: &str) -> Option<usize> {
        self.manifest
            .samples
            .iter()
            .position(|s| s.sample_id == sample_id)
    }

    /// Indices for `ids`, failing on any unknown id.
    pub fn indices(&self, ids: &[String]) -> Result<Vec<usize>> {
        let lookup: std::collections::HashMap<&str, usize> = self
            .manifest
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.sample_id.as_str(), i))
            .collect();
        ids.iter()
            .map(|id| {
                lookup
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Alignment(format!("sample id {id:?} not in manifest")))
            })
            .collect()
    }
}
