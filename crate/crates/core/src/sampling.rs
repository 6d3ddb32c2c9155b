//! Per-step update rules for ancestral (DDPM) and implicit (DDIM) sampling, and
//! classifier-free guidance mixing. The sampling loop that drives a network
//! lives in `protoguide-model`.

use serde::{Deserialize, Serialize};

use crate::diffusion::{posterior_mean_from_eps, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub method: SamplingMethod,
    /// Size of the DDIM timestep subset; ignored by DDPM, which visits every step.
    pub num_steps: usize,
    pub eta: f64,
    pub guidance_scale: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// `None` samples unconditionally from the null embedding.
    pub class_id: Option<usize>,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            method: SamplingMethod::Ddim,
            num_steps: 50,
            eta: 0.0,
            guidance_scale: 1.0,
            seed: 0,
            batch_size: 16,
            class_id: None,
        }
    }
}

impl SamplerSpec {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > total_steps {
            return Err(Error::InvalidConfig(format!(
                "num_steps must be in 1..={total_steps}, got {}",
                self.num_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::InvalidConfig("guidance scale must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Timesteps visited in order, from noisiest to cleanest.
    pub fn timesteps(&self, total_steps: usize) -> Result<Vec<usize>> {
        match self.method {
            SamplingMethod::Ddpm => Ok((0..total_steps).rev().collect()),
            SamplingMethod::Ddim => ddim_timesteps(self.num_steps, total_steps),
        }
    }
}

/// `eps_uncond + w (eps_cond - eps_uncond)`; `w = 1` returns `eps_cond` as is.
pub fn guided_epsilon(eps_cond: &ImageTensor, eps_uncond: &ImageTensor, w: f64) -> Result<ImageTensor> {
    eps_cond.check_same_shape(eps_uncond)?;
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_uncond.zip_map(eps_cond, |u, c| u + w * (c - u))
}

/// Ancestral step with fixed variance `beta_t`. No noise is added at `t = 0`.
pub fn ddpm_step(
    x_t: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    noise: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    let mean = posterior_mean_from_eps(x_t, t, eps_hat, schedule)?;
    if t == 0 {
        return Ok(mean);
    }
    let sd = schedule.betas()[t].sqrt();
    mean.zip_map(noise, |m, n| m + sd * n)
}

/// Noise scale of a DDIM transition between cumulative alphas.
pub fn ddim_sigma(alpha_bar_t: f64, alpha_bar_prev: f64, eta: f64) -> f64 {
    eta * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)).sqrt() * (1.0 - alpha_bar_t / alpha_bar_prev).sqrt()
}

/// DDIM transition from `t` to `t_prev`. `t_prev = None` jumps to the clean
/// endpoint (cumulative alpha 1). With `eta = 0` the noise argument is unused
/// and may be `None`.
pub fn ddim_step(
    x_t: &ImageTensor,
    t: usize,
    t_prev: Option<usize>,
    eps_hat: &ImageTensor,
    eta: f64,
    schedule: &NoiseSchedule,
    noise: Option<&ImageTensor>,
) -> Result<ImageTensor> {
    schedule.check_timestep(t)?;
    if let Some(p) = t_prev {
        if p >= t {
            return Err(Error::InvalidConfig(format!("t_prev {p} must be below t {t}")));
        }
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidConfig(format!("eta must be in [0, 1], got {eta}")));
    }
    x_t.check_same_shape(eps_hat)?;
    let abar = schedule.alpha_bars()[t];
    if abar <= 0.0 {
        return Err(Error::Degenerate { t, what: "alpha_bar equals 0" });
    }
    if abar >= 1.0 {
        return Err(Error::Degenerate { t, what: "alpha_bar equals 1" });
    }
    let abar_prev = t_prev.map_or(1.0, |p| schedule.alpha_bars()[p]);
    let sigma = ddim_sigma(abar, abar_prev, eta);
    let (sa, sn) = (abar.sqrt(), (1.0 - abar).sqrt());
    let sa_prev = abar_prev.sqrt();
    let dir = (1.0 - abar_prev - sigma * sigma).max(0.0).sqrt();

    let mut out = x_t.zip_map(eps_hat, |x, e| {
        let x0 = (x - sn * e) / sa;
        sa_prev * x0 + dir * e
    })?;
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| Error::InvalidConfig("stochastic DDIM step needs noise".into()))?;
        out = out.zip_map(noise, |v, n| v + sigma * n)?;
    }
    Ok(out)
}

/// Uniformly strided subset of `[0, total)` of size `num_steps`, always
/// containing `total - 1` and `0`, in descending order.
pub fn ddim_timesteps(num_steps: usize, total: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > total {
        return Err(Error::InvalidConfig(format!("num_steps must be in 1..={total}, got {num_steps}")));
    }
    if num_steps == 1 {
        return Ok(vec![total - 1]);
    }
    let last = (total - 1) as f64;
    let denom = (num_steps - 1) as f64;
    Ok((0..num_steps).rev().map(|i| (i as f64 * last / denom).round() as usize).collect())
}
