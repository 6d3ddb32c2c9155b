//! Gaussian forward process, its closed-form marginal, and the
//! noise-prediction parameterization of the reverse-process mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Parameters of a linear beta schedule, as stored in checkpoint sidecars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Precomputed betas, alphas and cumulative alpha products, indexed from 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("number of timesteps must be at least 1".into()));
        }
        if !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::InvalidSchedule("beta bounds must be finite".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| {
                    if i + 1 == steps {
                        beta_end
                    } else {
                        beta_start + span * i as f64 / (steps - 1) as f64
                    }
                })
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit betas, each strictly inside (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("number of timesteps must be at least 1".into()));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta[{i}] = {b} is outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::TimestepOutOfRange { t, len: self.len() });
        }
        Ok(())
    }
}

/// One step of the forward chain: `sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise`.
pub fn forward_step(
    x_prev: &ImageTensor,
    t: usize,
    noise: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_timestep(t)?;
    let beta = schedule.betas[t];
    let (keep, add) = ((1.0 - beta).sqrt(), beta.sqrt());
    x_prev.zip_map(noise, |x, n| keep * x + add * n)
}

/// Samples `x_t` directly from `x_0`: `sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`.
pub fn forward_marginal(
    x0: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_timestep(t)?;
    let abar = schedule.alpha_bars[t];
    let (keep, add) = (abar.sqrt(), (1.0 - abar).sqrt());
    x0.zip_map(eps, |x, e| keep * x + add * e)
}

/// Reverse-process mean from a noise prediction:
/// `(x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)`.
pub fn posterior_mean_from_eps(
    x_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_timestep(t)?;
    let abar = schedule.alpha_bars[t];
    if abar >= 1.0 {
        return Err(Error::Degenerate { t, what: "alpha_bar equals 1" });
    }
    let coef = schedule.betas[t] / (1.0 - abar).sqrt();
    let scale = 1.0 / schedule.alphas[t].sqrt();
    x_t.zip_map(eps_hat, |x, e| scale * (x - coef * e))
}

/// Clean-image estimate implied by a noise prediction (inverse of the marginal).
pub fn predict_x0_from_eps(
    x_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_timestep(t)?;
    let abar = schedule.alpha_bars[t];
    if abar <= 0.0 {
        return Err(Error::Degenerate { t, what: "alpha_bar equals 0" });
    }
    let (s, n) = (abar.sqrt(), (1.0 - abar).sqrt());
    x_t.zip_map(eps_hat, |x, e| (x - n * e) / s)
}

/// Variance of the true posterior `q(x_{t-1} | x_t, x_0)`, zero at `t = 0`.
pub fn posterior_variance(t: usize, schedule: &NoiseSchedule) -> Result<f64> {
    schedule.check_timestep(t)?;
    let abar = schedule.alpha_bars[t];
    let abar_prev = if t == 0 { 1.0 } else { schedule.alpha_bars[t - 1] };
    if abar >= 1.0 {
        return Err(Error::Degenerate { t, what: "alpha_bar equals 1" });
    }
    Ok((1.0 - abar_prev) / (1.0 - abar) * schedule.betas[t])
}
