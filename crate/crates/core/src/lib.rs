//! Numerical core for prototype-guided conditional diffusion.
//!
//! Everything here is a pure function of its inputs: noise is always passed
//! in by the caller, never drawn internally, so every stochastic routine has a
//! deterministic mode. Neural components live in `protoguide-model`.

pub mod diffusion;
pub mod error;
pub mod fsutil;
pub mod metrics;
pub mod prototype;
pub mod rng;
pub mod sampling;
pub mod tensor;

pub use diffusion::{
    forward_marginal, forward_step, posterior_mean_from_eps, posterior_variance,
    predict_x0_from_eps, NoiseSchedule, ScheduleConfig,
};
pub use error::{Error, Result};
pub use metrics::{compare_runs, Averaging, ClassMetrics, ConfusionMatrix, EvalReport, RunComparison};
pub use prototype::{
    assignment_probabilities, class_probability, dce_loss, prototype_loss, total_loss,
    train_prototypes, Codebook, PrototypeTrainConfig, TrainedCodebook,
};
pub use sampling::{
    ddim_sigma, ddim_step, ddim_timesteps, ddpm_step, guided_epsilon, SamplerSpec, SamplingMethod,
};
pub use tensor::ImageTensor;
