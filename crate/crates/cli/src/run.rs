//! Run directory layout and per-stage completion stamps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::error::{CliError, Result};

pub const STAMP: &str = "stage.json";

pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.run_dir() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn prepare(&self) -> PathBuf {
        self.root.join("prepare")
    }

    pub fn prototypes(&self) -> PathBuf {
        self.root.join("prototypes")
    }

    pub fn diffusion(&self, mode: Mode) -> PathBuf {
        self.root.join("diffusion").join(mode.as_str())
    }

    pub fn samples(&self, mode: Mode) -> PathBuf {
        self.root.join("samples").join(mode.as_str())
    }

    pub fn annotations(&self, mode: Mode) -> PathBuf {
        self.root.join("annotations").join(mode.as_str())
    }

    pub fn eval(&self, label: &str) -> PathBuf {
        self.root.join("eval").join(label)
    }

    pub fn compare(&self) -> PathBuf {
        self.root.join("compare")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stamp {
    pub stage: String,
    pub fingerprint: String,
    pub seed: u64,
    pub complete: bool,
    /// Named outputs, relative to the stage directory.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
}

impl Stamp {
    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(STAMP);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(STAMP), self)
    }

    pub fn artifact(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        self.artifacts
            .get(name)
            .map(|p| dir.join(p))
            .ok_or_else(|| CliError::Runtime(format!("{} does not record a {name}", dir.join(STAMP).display())))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    bytes.push(b'\n');
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    protoguide_core::fsutil::write_atomic(path, &bytes).map_err(|e| CliError::io(path, e))
}

/// A completed stage the caller depends on, or an error naming the command to run.
pub fn require(dir: &Path, command: &str) -> Result<Stamp> {
    match Stamp::read(dir)? {
        Some(s) if s.complete => Ok(s),
        _ => Err(CliError::Data(format!("{} is missing; run `protoguide {command}` first", dir.display()))),
    }
}

pub enum Plan {
    /// Finished earlier with the same configuration.
    UpToDate,
    Run,
}

/// Decides whether a stage has to run. A finished stage with a different
/// fingerprint is only redone with `--force`.
pub fn plan(dir: &Path, stage: &str, fingerprint: &str, force: bool) -> Result<Plan> {
    match Stamp::read(dir)? {
        Some(s) if s.complete && !force => {
            if s.fingerprint == fingerprint {
                Ok(Plan::UpToDate)
            } else {
                Err(CliError::Config(format!(
                    "{stage} in {} was completed with a different configuration; pass --force to redo it",
                    dir.display()
                )))
            }
        }
        _ => Ok(Plan::Run),
    }
}

/// Output directory built next to its final location and moved into place on commit.
pub struct Staging {
    dir: PathBuf,
    tmp: PathBuf,
}

impl Staging {
    pub fn begin(dir: &Path) -> Result<Self> {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = dir.with_file_name(format!("{name}.partial"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        Ok(Self { dir: dir.to_path_buf(), tmp })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn commit(self, stamp: &Stamp) -> Result<PathBuf> {
        stamp.write(&self.tmp)?;
        if self.dir.exists() {
            fs::remove_dir_all(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        }
        fs::rename(&self.tmp, &self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        Ok(self.dir)
    }
}
