//! Dataset manifests over `root/<class_name>/*.{png,jpg,jpeg}` corpora.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use protoguide_core::rng::derived;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, write_json, DataError, Result};

pub const SCHEMA_VERSION: u32 = 1;
const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    /// Relative to the manifest root, `/`-separated.
    pub path: String,
    pub class_id: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub source: String,
    pub root: PathBuf,
    pub seed: u64,
    pub per_class_n: usize,
    pub holdout_per_class: usize,
    /// Index is the class id.
    pub class_names: Vec<String>,
    pub records: Vec<ImageRecord>,
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| DataError::io(dir, e))? {
        out.push(entry.map_err(|e| DataError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Samples `per_class_n` training and `holdout_per_class` holdout images per
/// class, uniformly without replacement. Classes are sorted by directory name
/// and files by name before shuffling, so ids and picks do not depend on the
/// order the filesystem lists entries in.
pub fn build_manifest(
    root: &Path,
    per_class_n: usize,
    holdout_per_class: usize,
    seed: u64,
    source: &str,
) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(DataError::MissingRoot(root.to_path_buf()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(DataError::NoClasses(root.to_path_buf()));
    }
    let needed = per_class_n + holdout_per_class;
    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut records = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).ok_or_else(|| {
            DataError::Manifest(format!("class directory {} is not valid UTF-8", dir.display()))
        })?;
        let mut files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect();
        if files.is_empty() {
            return Err(DataError::EmptyClass(name.to_string()));
        }
        if files.len() < needed {
            return Err(DataError::InsufficientImages { class: name.to_string(), found: files.len(), needed });
        }
        files.shuffle(&mut derived(seed, &[class_id as u64]));
        for (i, file) in files.into_iter().take(needed).enumerate() {
            let file_name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            records.push(ImageRecord {
                path: format!("{name}/{file_name}"),
                class_id,
                split: if i < per_class_n { Split::Train } else { Split::Holdout },
                pixel_hash: None,
            });
        }
        class_names.push(name.to_string());
    }
    let root = fs::canonicalize(root).map_err(|e| DataError::io(root, e))?;
    Ok(DatasetManifest {
        schema_version: SCHEMA_VERSION,
        source: source.to_string(),
        root,
        seed,
        per_class_n,
        holdout_per_class,
        class_names,
        records,
    })
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Checks the invariants a loaded manifest must satisfy.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DataError::Manifest(format!("unsupported schema version {}", self.schema_version)));
        }
        if self.class_names.is_empty() {
            return Err(DataError::Manifest("no classes".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if r.class_id >= self.class_names.len() {
                return Err(DataError::Manifest(format!("{} has unknown class id {}", r.path, r.class_id)));
            }
            if !seen.insert(r.path.as_str()) {
                return Err(DataError::Manifest(format!("{} appears more than once", r.path)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        m.validate()?;
        Ok(m)
    }
}
