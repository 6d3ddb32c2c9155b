//! The run configuration: one JSON file covering every stage.
//!
//! Seeds inside the section configs are ignored; each stage derives its own
//! from the top-level `seed`, so a single number reproduces a whole run.

use std::path::{Path, PathBuf};

use protoguide_core::rng::derive_seed;
use protoguide_core::{PrototypeTrainConfig, SamplerSpec, SamplingMethod};
use protoguide_data::EncoderSpec;
use protoguide_model::{ClassifierConfig, DenoiserConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Mode {
    /// Random class embeddings trained with the network, classifier-free guidance.
    BaselineCfg,
    /// Class embeddings copied from the prototype codebook and frozen.
    PrototypeGuided,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::BaselineCfg => "baseline_cfg",
            Mode::PrototypeGuided => "prototype_guided",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with one sub-directory of images per class.
    pub root: PathBuf,
    #[serde(default = "default_source")]
    pub source: String,
    pub per_class_n: usize,
    pub holdout_per_class: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default)]
    pub encoder: EncoderSpec,
}

fn default_source() -> String {
    "custom".into()
}

fn default_image_size() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub per_class: usize,
    pub method: SamplingMethod,
    pub num_steps: usize,
    pub eta: f64,
    pub guidance_scale: f64,
    pub batch_size: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        let spec = SamplerSpec::default();
        Self {
            per_class: 100,
            method: spec.method,
            num_steps: spec.num_steps,
            eta: spec.eta,
            guidance_scale: spec.guidance_scale,
            batch_size: spec.batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainSource {
    /// Images generated by the run's sample stage for the selected mode.
    #[default]
    Synthetic,
    /// The real training split of the manifest.
    Real,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub train_source: TrainSource,
    pub classifier: ClassifierConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub criteria: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    #[serde(default = "default_output_root")]
    pub output_root: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub mode: Mode,
    pub data: DataConfig,
    #[serde(default)]
    pub prototypes: PrototypeTrainConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub sampler: SampleConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub annotation: AnnotationConfig,
}

fn default_output_root() -> PathBuf {
    PathBuf::from("runs")
}

/// Sub-streams of the run seed, one per stage.
pub mod stream {
    pub const PROTOTYPES: u64 = 1;
    pub const DIFFUSION: u64 = 2;
    pub const RANDOM_TABLE: u64 = 3;
    pub const SAMPLING: u64 = 4;
    pub const CLASSIFIER: u64 = 5;
}

pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub output_root: Option<PathBuf>,
}

impl RunConfig {
    /// Parses, applies overrides, resolves relative paths against the config
    /// file's directory and validates.
    pub fn load(path: &Path, overrides: Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = overrides.mode {
            cfg.mode = mode;
        }
        if let Some(root) = overrides.output_root {
            cfg.output_root = root;
        }
        if cfg.data.root.is_relative() {
            cfg.data.root = base.join(&cfg.data.root);
        }
        if cfg.output_root.is_relative() {
            cfg.output_root = base.join(&cfg.output_root);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return bad(format!("run_id {:?} must be a plain directory name", self.run_id));
        }
        if self.data.per_class_n == 0 {
            return bad("data.per_class_n must be positive".into());
        }
        if self.data.image_size != self.denoiser.input_size {
            return bad(format!(
                "data.image_size {} differs from denoiser.input_size {}",
                self.data.image_size, self.denoiser.input_size
            ));
        }
        self.denoiser.validate()?;
        let schedule = self.denoiser.schedule.build()?;
        self.sampler_spec().validate(schedule.len())?;
        self.eval.classifier.validate()?;
        if self.sampler.per_class == 0 {
            return bad("sampler.per_class must be positive".into());
        }
        let d = self.data.encoder.dim(self.denoiser.in_channels);
        if self.mode == Mode::PrototypeGuided && d != self.denoiser.condition_dim {
            return bad(format!(
                "denoiser.condition_dim {} must equal the embedding dimension {d} in prototype_guided mode",
                self.denoiser.condition_dim
            ));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root.join(&self.run_id)
    }

    pub fn stage_seed(&self, stream: u64) -> u64 {
        derive_seed(self.seed, &[stream])
    }

    pub fn prototype_config(&self) -> PrototypeTrainConfig {
        PrototypeTrainConfig { seed: self.stage_seed(stream::PROTOTYPES), ..self.prototypes.clone() }
    }

    pub fn sampler_spec(&self) -> SamplerSpec {
        SamplerSpec {
            method: self.sampler.method,
            num_steps: self.sampler.num_steps,
            eta: self.sampler.eta,
            guidance_scale: self.sampler.guidance_scale,
            seed: self.stage_seed(stream::SAMPLING),
            batch_size: self.sampler.batch_size,
            class_id: None,
        }
    }
}

/// Hex SHA-256 of the canonical JSON of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config types serialize");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}
