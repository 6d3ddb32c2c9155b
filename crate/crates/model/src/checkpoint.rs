//! Denoiser checkpoints: a safetensors weight file plus a JSON sidecar holding
//! everything needed to resume (config, optimizer state, RNG position).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditioningSource, ConditioningTable};
use crate::denoiser::Denoiser;
use crate::error::{ModelError, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::unet::DenoiserConfig;

pub const SCHEMA_VERSION: u32 = 1;
const FROZEN_TABLE: &str = "conditioning.frozen";

/// Position of a ChaCha stream. `word_pos` is kept as a decimal string since it is 128-bit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| ModelError::Checkpoint(format!("bad rng position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSidecar {
    pub schema_version: u32,
    pub weights: String,
    pub config: DenoiserConfig,
    pub conditioning_source: ConditioningSource,
    pub frozen: bool,
    pub num_classes: usize,
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
    pub optimizer: AdamWConfig,
    pub rng: RngState,
}

/// Everything restored from a checkpoint.
pub struct Restored {
    pub denoiser: Denoiser,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub sidecar: CheckpointSidecar,
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes `<stem>.safetensors` and `<stem>.json` into `dir`. Each file is
/// written to a temporary name and renamed, and the sidecar goes last, so a
/// sidecar on disk always refers to complete weights.
pub fn save(
    dir: &Path,
    stem: &str,
    denoiser: &Denoiser,
    optimizer: &AdamW,
    rng: &ChaCha8Rng,
    seed: u64,
    epoch: usize,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut tensors = denoiser.params().tensors();
    tensors.extend(optimizer.state_tensors());
    if denoiser.is_frozen() {
        let table = denoiser.conditioning_table()?;
        let t = Tensor::from_vec(table.rows().to_vec(), (table.num_rows(), table.dim()), &Device::Cpu)?;
        tensors.insert(FROZEN_TABLE.to_string(), t);
    }
    let weights_name = format!("{stem}.safetensors");
    let weights = dir.join(&weights_name);
    let tmp = tmp_path(&weights);
    candle_core::safetensors::save(&tensors, &tmp)?;
    fs::rename(&tmp, &weights)?;

    let sidecar = CheckpointSidecar {
        schema_version: SCHEMA_VERSION,
        weights: weights_name,
        config: denoiser.config().clone(),
        conditioning_source: denoiser.conditioning_source(),
        frozen: denoiser.is_frozen(),
        num_classes: denoiser.num_classes(),
        seed,
        epoch,
        step: optimizer.steps_taken(),
        optimizer: *optimizer.config(),
        rng: RngState::capture(rng),
    };
    let path = dir.join(format!("{stem}.json"));
    let mut json = serde_json::to_vec_pretty(&sidecar)?;
    json.push(b'\n');
    protoguide_core::fsutil::write_atomic(&path, &json)?;
    Ok(path)
}

pub fn read_sidecar(path: &Path) -> Result<CheckpointSidecar> {
    let sidecar: CheckpointSidecar = serde_json::from_slice(&fs::read(path)?)?;
    if sidecar.schema_version != SCHEMA_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported schema version {}", sidecar.schema_version)));
    }
    Ok(sidecar)
}

/// Rebuilds the denoiser, optimizer and RNG from a sidecar path.
pub fn load(sidecar_path: &Path) -> Result<Restored> {
    let sidecar = read_sidecar(sidecar_path)?;
    let dir = sidecar_path.parent().unwrap_or(Path::new("."));
    let tensors: HashMap<String, Tensor> = candle_core::safetensors::load(dir.join(&sidecar.weights), &Device::Cpu)?;
    let (c, d) = (sidecar.num_classes, sidecar.config.condition_dim);
    let table = if sidecar.frozen {
        let t = tensors
            .get(FROZEN_TABLE)
            .ok_or_else(|| ModelError::Checkpoint("frozen conditioning table missing".into()))?;
        if t.dtype() != DType::F64 {
            return Err(ModelError::Checkpoint("frozen conditioning table must be f64".into()));
        }
        let rows = t.flatten_all()?.to_vec1::<f64>()?;
        ConditioningTable::new(c, d, rows, true, sidecar.conditioning_source)?
    } else {
        // Placeholder rows; the trained values are loaded with the other parameters.
        ConditioningTable::new(c, d, vec![0.0; (c + 1) * d], false, sidecar.conditioning_source)?
    };
    let denoiser = Denoiser::new(sidecar.config.clone(), table, sidecar.seed)?;
    denoiser.params().load(&tensors)?;
    let mut optimizer = AdamW::new(sidecar.optimizer);
    let state = tensors.into_iter().filter(|(k, _)| k.starts_with("optim.")).collect();
    optimizer.restore(sidecar.step, &state)?;
    let rng = sidecar.rng.restore()?;
    Ok(Restored { denoiser, optimizer, rng, sidecar })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn rng_state_round_trips_mid_stream() {
        let mut rng = protoguide_core::rng::seeded(77);
        for _ in 0..13 {
            rng.next_u32();
        }
        let state = RngState::capture(&rng);
        let json = serde_json::to_string(&state).unwrap();
        let mut back = serde_json::from_str::<RngState>(&json).unwrap().restore().unwrap();
        for _ in 0..100 {
            assert_eq!(rng.next_u64(), back.next_u64());
        }
    }

    #[test]
    fn bad_word_position_is_an_error() {
        let state = RngState { seed: [0; 32], stream: 0, word_pos: "x".into() };
        assert!(state.restore().is_err());
    }
}
