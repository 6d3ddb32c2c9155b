//! The manifest written next to a set of generated images.

use std::path::{Path, PathBuf};

use protoguide_core::SamplerSpec;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, DataError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    /// Relative to the directory holding the manifest.
    pub path: String,
    pub class_id: usize,
    pub class_name: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSet {
    pub schema_version: u32,
    pub run_id: String,
    pub mode: String,
    pub checkpoint: String,
    pub seed: u64,
    pub sampler: SamplerSpec,
    pub class_names: Vec<String>,
    pub entries: Vec<SampleEntry>,
}

impl SampleSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = read_json(path)?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(DataError::Manifest(format!("unsupported sample-set schema {}", s.schema_version)));
        }
        if let Some(e) = s.entries.iter().find(|e| s.class_names.get(e.class_id) != Some(&e.class_name)) {
            return Err(DataError::Manifest(format!("{} has inconsistent class {}", e.path, e.class_id)));
        }
        Ok(s)
    }

    pub fn resolve(&self, dir: &Path, entry: &SampleEntry) -> PathBuf {
        dir.join(&entry.path)
    }
}
