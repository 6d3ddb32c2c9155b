//! Epoch loop for the denoiser with periodic checkpoints and exact resume.

use std::path::{Path, PathBuf};
use std::time::Instant;

use protoguide_core::diffusion::NoiseSchedule;
use protoguide_core::rng::{derive_seed, derived};
use protoguide_core::{Error as CoreError, ImageTensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::conditioning::ConditioningTable;
use crate::denoiser::Denoiser;
use crate::error::Result;
use crate::optim::{AdamW, AdamWConfig};
use crate::unet::DenoiserConfig;

/// Normalized training images with their class indices.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
}

impl TrainData {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<usize>) -> Result<Self> {
        if images.is_empty() {
            return Err(CoreError::EmptyBatch.into());
        }
        if images.len() != labels.len() {
            return Err(CoreError::DimensionMismatch { expected: images.len(), got: labels.len() }.into());
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub wall_time: f64,
}

pub struct DiffusionTrainer {
    denoiser: Denoiser,
    optimizer: AdamW,
    schedule: NoiseSchedule,
    rng: ChaCha8Rng,
    seed: u64,
    epoch: usize,
}

impl DiffusionTrainer {
    /// Network init uses one derived stream and the training draws another,
    /// so changing the data order never perturbs the initial weights.
    pub fn new(config: DenoiserConfig, table: ConditioningTable, seed: u64) -> Result<Self> {
        let schedule = config.schedule.build()?;
        let optimizer = AdamW::new(AdamWConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        });
        let denoiser = Denoiser::new(config, table, derive_seed(seed, &[0]))?;
        Ok(Self { denoiser, optimizer, schedule, rng: derived(seed, &[1]), seed, epoch: 0 })
    }

    pub fn resume(sidecar: &Path) -> Result<Self> {
        let r = checkpoint::load(sidecar)?;
        let schedule = r.sidecar.config.schedule.build()?;
        Ok(Self {
            denoiser: r.denoiser,
            optimizer: r.optimizer,
            schedule,
            rng: r.rng,
            seed: r.sidecar.seed,
            epoch: r.sidecar.epoch,
        })
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn into_denoiser(self) -> Denoiser {
        self.denoiser
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.optimizer.steps_taken()
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.denoiser.config().epochs
    }

    /// One pass over shuffled data in minibatches.
    pub fn train_epoch(&mut self, data: &TrainData) -> Result<Vec<StepMetrics>> {
        let classes = self.denoiser.num_classes();
        if let Some(&bad) = data.labels.iter().find(|&&l| l >= classes) {
            return Err(CoreError::UnknownClass(bad).into());
        }
        let cfg = self.denoiser.config().clone();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut out = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let start = Instant::now();
            let images: Vec<ImageTensor> = chunk.iter().map(|&i| data.images[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let loss = self.denoiser.training_step(
                &images,
                &labels,
                &self.schedule,
                cfg.uncond_prob,
                &mut self.optimizer,
                &mut self.rng,
            )?;
            if !loss.is_finite() {
                return Err(CoreError::NonFinite("training loss").into());
            }
            out.push(StepMetrics {
                step: self.optimizer.steps_taken(),
                epoch: self.epoch,
                loss,
                learning_rate: cfg.learning_rate,
                wall_time: start.elapsed().as_secs_f64(),
            });
        }
        self.epoch += 1;
        Ok(out)
    }

    /// Writes `epoch_<NNNNNN>` checkpoint files into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        checkpoint::save(
            dir,
            &checkpoint_stem(self.epoch),
            &self.denoiser,
            &self.optimizer,
            &self.rng,
            self.seed,
            self.epoch,
        )
    }
}

pub fn checkpoint_stem(epoch: usize) -> String {
    format!("epoch_{epoch:06}")
}

/// The sidecar of the highest-epoch checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(epoch) = name.strip_prefix("epoch_").and_then(|n| n.strip_suffix(".json")) else { continue };
        let Ok(epoch) = epoch.parse::<usize>() else { continue };
        if best.as_ref().is_none_or(|(e, _)| epoch > *e) {
            best = Some((epoch, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latest_checkpoint_picks_highest_epoch() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(latest_checkpoint(dir.path()).unwrap(), None);
        for name in ["epoch_000002.json", "epoch_000010.json", "epoch_000009.json", "epoch_x.json", "notes.json"] {
            std::fs::write(dir.path().join(name), "{}").unwrap();
        }
        assert_eq!(latest_checkpoint(dir.path()).unwrap(), Some(dir.path().join("epoch_000010.json")));
        assert_eq!(checkpoint_stem(7), "epoch_000007");
    }

    #[test]
    fn train_data_validates_lengths() {
        assert!(TrainData::new(vec![], vec![]).is_err());
        assert!(TrainData::new(vec![ImageTensor::zeros([1, 2, 2])], vec![0, 1]).is_err());
    }
}
