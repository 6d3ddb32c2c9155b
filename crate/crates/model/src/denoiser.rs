//! The model state (UNet + conditioning table) behind `predict_noise`, and the
//! simplified noise-prediction training objective.

use candle_core::{Device, Tensor};
use protoguide_core::diffusion::{forward_marginal, NoiseSchedule};
use protoguide_core::{Error as CoreError, ImageTensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{sinusoidal_time_embedding, ConditioningSource, ConditioningTable};
use crate::error::{ModelError, Result};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::unet::{DenoiserConfig, UNet};

/// Anything that predicts the noise in a batch of noised images.
pub trait NoisePredictor {
    /// `x_t` is `(N, C, H, W)` f32. An RNG enables training-mode stochasticity.
    fn predict_batch(
        &self,
        x_t: &Tensor,
        timesteps: &[usize],
        classes: &[Option<usize>],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor>;
}

pub const CLASS_EMBEDDINGS: &str = "class_embeddings";

enum Table {
    Frozen { table: ConditioningTable, tensor: Tensor },
    Trainable { source: ConditioningSource, num_classes: usize, tensor: Tensor },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: usize,
    pub trainable: usize,
}

pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    unet: UNet,
    table: Table,
}

impl Denoiser {
    /// Network weights are initialized from `seed` before the table is
    /// registered, so both conditioning modes start from identical UNet weights.
    pub fn new(config: DenoiserConfig, table: ConditioningTable, seed: u64) -> Result<Self> {
        config.validate()?;
        if table.dim() != config.condition_dim {
            return Err(CoreError::DimensionMismatch { expected: config.condition_dim, got: table.dim() }.into());
        }
        let device = Device::Cpu;
        let mut params = ParamStore::new(seed, device.clone());
        let unet = UNet::new(&mut params, &config)?;
        let table = if table.frozen() {
            let tensor = table.to_tensor(&device)?;
            Table::Frozen { table, tensor }
        } else {
            let tensor = params.adopt(CLASS_EMBEDDINGS, &table.to_tensor(&device)?)?;
            Table::Trainable { source: table.source(), num_classes: table.num_classes(), tensor }
        };
        Ok(Self { config, params, unet, table })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        match &self.table {
            Table::Frozen { table, .. } => table.num_classes(),
            Table::Trainable { num_classes, .. } => *num_classes,
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self.table, Table::Frozen { .. })
    }

    pub fn conditioning_source(&self) -> ConditioningSource {
        match &self.table {
            Table::Frozen { table, .. } => table.source(),
            Table::Trainable { source, .. } => *source,
        }
    }

    pub fn table_tensor(&self) -> &Tensor {
        match &self.table {
            Table::Frozen { tensor, .. } => tensor,
            Table::Trainable { tensor, .. } => tensor,
        }
    }

    /// Current table contents. For a frozen table these are the original `f64` rows.
    pub fn conditioning_table(&self) -> Result<ConditioningTable> {
        match &self.table {
            Table::Frozen { table, .. } => Ok(table.clone()),
            Table::Trainable { source, num_classes, tensor } => {
                let rows = tensor.flatten_all()?.to_vec1::<f32>()?.into_iter().map(f64::from).collect();
                ConditioningTable::new(*num_classes, self.config.condition_dim, rows, false, *source)
            }
        }
    }

    pub fn parameter_count(&self) -> ParameterCount {
        let trainable = self.params.num_elements();
        let frozen = match &self.table {
            Table::Frozen { tensor, .. } => tensor.elem_count(),
            Table::Trainable { .. } => 0,
        };
        ParameterCount { total: trainable + frozen, trainable }
    }

    fn condition_batch(&self, timesteps: &[usize], classes: &[Option<usize>]) -> Result<Tensor> {
        let steps = self.config.schedule.steps;
        let mut time = Vec::with_capacity(timesteps.len() * self.config.time_embed_dim);
        let mut rows = Vec::with_capacity(classes.len());
        let n = self.num_classes();
        for (&t, &c) in timesteps.iter().zip(classes) {
            if t >= steps {
                return Err(CoreError::TimestepOutOfRange { t, len: steps }.into());
            }
            time.extend(sinusoidal_time_embedding(t, self.config.time_embed_dim)?.into_iter().map(|v| v as f32));
            rows.push(match c {
                None => n as u32,
                Some(c) if c < n => c as u32,
                Some(c) => return Err(CoreError::UnknownClass(c).into()),
            });
        }
        let device = self.params.device();
        let time = Tensor::from_vec(time, (timesteps.len(), self.config.time_embed_dim), device)?;
        let idx = Tensor::from_vec(rows, classes.len(), device)?;
        let class_rows = self.table_tensor().index_select(&idx, 0)?;
        Ok(Tensor::cat(&[&time, &class_rows], 1)?)
    }

    /// Inference-mode noise prediction for one image.
    pub fn predict_noise(&self, x_t: &ImageTensor, t: usize, class_id: Option<usize>) -> Result<ImageTensor> {
        let shape = self.config.image_shape();
        if x_t.shape() != shape {
            return Err(CoreError::ShapeMismatch { expected: shape.to_vec(), got: x_t.shape().to_vec() }.into());
        }
        let x = images_to_tensor(std::slice::from_ref(x_t), self.params.device())?;
        let out = self.predict_batch(&x, &[t], &[class_id], None)?;
        Ok(tensor_to_images(&out)?.remove(0))
    }

    /// One optimizer update on the noise-prediction loss; returns the loss.
    pub fn training_step(
        &self,
        x0: &[ImageTensor],
        classes: &[usize],
        schedule: &NoiseSchedule,
        uncond_prob: f64,
        optimizer: &mut AdamW,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let loss = diffusion_loss(self, x0, classes, schedule, uncond_prob, rng)?;
        let value = loss.to_scalar::<f32>()? as f64;
        let grads = loss.backward()?;
        optimizer.step(&self.params, &grads)?;
        Ok(value)
    }
}

impl NoisePredictor for Denoiser {
    fn predict_batch(
        &self,
        x_t: &Tensor,
        timesteps: &[usize],
        classes: &[Option<usize>],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let (n, c, h, w) = x_t.dims4()?;
        let [ec, eh, ew] = self.config.image_shape();
        if (c, h, w) != (ec, eh, ew) {
            return Err(CoreError::ShapeMismatch { expected: vec![ec, eh, ew], got: vec![c, h, w] }.into());
        }
        if timesteps.len() != n || classes.len() != n {
            return Err(ModelError::Config("timesteps and classes must match the batch size".into()));
        }
        let z = self.condition_batch(timesteps, classes)?;
        self.unet.forward(x_t, &z, rng)
    }
}

/// Mean squared error between drawn noise and its prediction. Per sample, in
/// order: a timestep uniform over the schedule, the noise, and the
/// conditioning-dropout coin.
pub fn diffusion_loss<P: NoisePredictor + ?Sized>(
    model: &P,
    x0: &[ImageTensor],
    classes: &[usize],
    schedule: &NoiseSchedule,
    uncond_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if x0.is_empty() {
        return Err(CoreError::EmptyBatch.into());
    }
    if x0.len() != classes.len() {
        return Err(CoreError::DimensionMismatch { expected: x0.len(), got: classes.len() }.into());
    }
    if !(0.0..=1.0).contains(&uncond_prob) {
        return Err(ModelError::Config(format!("uncond_prob must be in [0, 1], got {uncond_prob}")));
    }
    let mut noised = Vec::with_capacity(x0.len());
    let mut noises = Vec::with_capacity(x0.len());
    let mut timesteps = Vec::with_capacity(x0.len());
    let mut conds = Vec::with_capacity(x0.len());
    for (x, &c) in x0.iter().zip(classes) {
        let t = rng.gen_range(0..schedule.len());
        let eps = ImageTensor::standard_normal(x.shape(), rng);
        let drop = rng.gen::<f64>() < uncond_prob;
        noised.push(forward_marginal(x, t, &eps, schedule)?);
        noises.push(eps);
        timesteps.push(t);
        conds.push(if drop { None } else { Some(c) });
    }
    let device = Device::Cpu;
    let x_t = images_to_tensor(&noised, &device)?;
    let eps = images_to_tensor(&noises, &device)?;
    let pred = model.predict_batch(&x_t, &timesteps, &conds, Some(rng))?;
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

pub fn images_to_tensor(images: &[ImageTensor], device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or(CoreError::EmptyBatch)?.shape();
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for img in images {
        if img.shape() != first {
            return Err(CoreError::ShapeMismatch { expected: first.to_vec(), got: img.shape().to_vec() }.into());
        }
        data.extend(img.data().iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_vec(data, (images.len(), first[0], first[1], first[2]), device)?)
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageTensor>> {
    let (n, c, h, w) = t.dims4()?;
    let flat = t.flatten_all()?.to_vec1::<f32>()?;
    let per = c * h * w;
    (0..n)
        .map(|i| {
            let data = flat[i * per..(i + 1) * per].iter().map(|&v| f64::from(v)).collect();
            Ok(ImageTensor::new([c, h, w], data)?)
        })
        .collect()
}
