//! Neural components: the conditional UNet noise predictor with its class
//! conditioning table, the diffusion trainer with checkpoint/resume, the
//! guided sampling loop, and the downstream classifiers used for evaluation.
//!
//! All randomness (initialization, dropout, timesteps, noise) comes from
//! seeded ChaCha streams owned by the caller, never from the device RNG, so a
//! (config, seed) pair reproduces every artifact.

pub mod checkpoint;
pub mod classifier;
pub mod conditioning;
pub mod denoiser;
pub mod error;
pub mod optim;
pub mod params;
pub mod sample;
pub mod trainer;
pub mod unet;

pub use classifier::{evaluate, train_classifier, Classifier, ClassifierConfig, ClassifierPreset};
pub use conditioning::{
    build_condition, init_from_prototypes, init_random, sinusoidal_time_embedding, ConditioningSource,
    ConditioningTable,
};
pub use denoiser::{diffusion_loss, Denoiser, NoisePredictor};
pub use error::{ModelError, Result};
pub use sample::{sample, sample_class};
pub use trainer::{DiffusionTrainer, StepMetrics, TrainData};
pub use unet::DenoiserConfig;
