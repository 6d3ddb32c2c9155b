//! AdamW with serializable moment estimates, so resumed training continues
//! exactly where a checkpoint left off.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    first: HashMap<String, Tensor>,
    second: HashMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, first: HashMap::new(), second: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// One decoupled-weight-decay Adam update. Parameters without a gradient
    /// are left untouched.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // Gradients carry their own op history; keeping it would chain every step's graph together.
            let g = g.detach();
            let g = &g;
            let m = match self.first.get(name) {
                Some(m) => ((m * c.beta1)? + (g * (1.0 - c.beta1))?)?,
                None => (g * (1.0 - c.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let theta = var.as_tensor().detach();
            let decayed = (&theta * (1.0 - c.learning_rate * c.weight_decay))?;
            var.set(&(decayed - (update * c.learning_rate)?)?)?;
            self.first.insert(name.clone(), m.detach());
            self.second.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    pub fn state_tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (k, v) in &self.first {
            out.insert(format!("optim.m.{k}"), v.clone());
        }
        for (k, v) in &self.second {
            out.insert(format!("optim.v.{k}"), v.clone());
        }
        out
    }

    pub fn restore(&mut self, step: u64, tensors: &HashMap<String, Tensor>) -> Result<()> {
        self.step = step;
        self.first.clear();
        self.second.clear();
        for (k, v) in tensors {
            if let Some(name) = k.strip_prefix("optim.m.") {
                self.first.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("optim.v.") {
                self.second.insert(name.to_string(), v.clone());
            }
        }
        if self.first.len() != self.second.len() {
            return Err(ModelError::Checkpoint("optimizer moments are incomplete".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ParamStore::new(0, Device::Cpu);
        params.constant("w", &[3], 2.0).unwrap();
        let mut opt = AdamW::new(AdamWConfig { learning_rate: 0.05, weight_decay: 0.0, ..Default::default() });
        for _ in 0..400 {
            let w = params.get("w").unwrap().as_tensor();
            let loss = (w - 0.5).unwrap().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&params, &grads).unwrap();
        }
        let w = params.get("w").unwrap().as_tensor().to_vec1::<f32>().unwrap();
        assert!(w.iter().all(|v| (v - 0.5).abs() < 1e-2), "{w:?}");
        assert_eq!(opt.steps_taken(), 400);
    }
}
