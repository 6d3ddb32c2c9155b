//! Class conditioning: the per-class embedding table (plus a null row for
//! unconditional prediction), the sinusoidal time embedding, and their
//! concatenation into the vector that conditions the UNet.

use candle_core::{Device, Tensor};
use protoguide_core::{Codebook, Error as CoreError};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::unet::DenoiserConfig;

pub const RANDOM_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningSource {
    /// Random rows optimized together with the network (classifier-free guidance baseline).
    RandomTrainable,
    /// Rows copied from a learned prototype codebook and never updated.
    PrototypeFrozen,
}

/// `num_classes + 1` rows of width `dim`; the last row is the null (unconditional) embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningTable {
    num_classes: usize,
    dim: usize,
    rows: Vec<f64>,
    frozen: bool,
    source: ConditioningSource,
}

impl ConditioningTable {
    pub fn new(
        num_classes: usize,
        dim: usize,
        rows: Vec<f64>,
        frozen: bool,
        source: ConditioningSource,
    ) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(ModelError::Config("conditioning table needs classes and a positive width".into()));
        }
        if rows.len() != (num_classes + 1) * dim {
            return Err(CoreError::DimensionMismatch { expected: (num_classes + 1) * dim, got: rows.len() }.into());
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("conditioning table").into());
        }
        Ok(Self { num_classes, dim, rows, frozen, source })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_rows(&self) -> usize {
        self.num_classes + 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn source(&self) -> ConditioningSource {
        self.source
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    /// Row index for a class, or the null row for `None`.
    pub fn row_index(&self, class_id: Option<usize>) -> Result<usize> {
        match class_id {
            None => Ok(self.num_classes),
            Some(c) if c < self.num_classes => Ok(c),
            Some(c) => Err(CoreError::UnknownClass(c).into()),
        }
    }

    pub fn row(&self, class_id: Option<usize>) -> Result<&[f64]> {
        let i = self.row_index(class_id)?;
        Ok(&self.rows[i * self.dim..(i + 1) * self.dim])
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let data: Vec<f32> = self.rows.iter().map(|&v| v as f32).collect();
        Ok(Tensor::from_vec(data, (self.num_rows(), self.dim), device)?)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.rows.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Frozen table whose class rows are the codebook's first prototype per class
/// (bit-for-bit) and whose null row is zero. The codebook's class ids must be
/// `0..C` in order.
pub fn init_from_prototypes(codebook: &Codebook, condition_dim: usize) -> Result<ConditioningTable> {
    if codebook.dim() != condition_dim {
        return Err(CoreError::DimensionMismatch { expected: condition_dim, got: codebook.dim() }.into());
    }
    let c = codebook.num_classes();
    if codebook.class_ids().iter().enumerate().any(|(i, &id)| i != id) {
        return Err(ModelError::Config("codebook class ids must be contiguous from 0".into()));
    }
    let mut rows = Vec::with_capacity((c + 1) * condition_dim);
    for id in 0..c {
        rows.extend_from_slice(codebook.conditioning_vector(id)?);
    }
    rows.extend(std::iter::repeat_n(0.0, condition_dim));
    ConditioningTable::new(c, condition_dim, rows, true, ConditioningSource::PrototypeFrozen)
}

/// Trainable table with every row (null row included) drawn from N(0, 0.02^2).
pub fn init_random(num_classes: usize, dim: usize, seed: u64) -> Result<ConditioningTable> {
    let mut rng = protoguide_core::rng::seeded(seed);
    let normal = Normal::new(0.0, RANDOM_INIT_STD).expect("valid std");
    let rows = (0..(num_classes + 1) * dim).map(|_| normal.sample(&mut rng)).collect();
    ConditioningTable::new(num_classes, dim, rows, false, ConditioningSource::RandomTrainable)
}

/// Interleaved sinusoids: element `2i` is `sin(t / 10000^(2i/dim))`, element
/// `2i+1` the matching cosine.
pub fn sinusoidal_time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(ModelError::Config(format!("time embedding width must be even and positive, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / dim as f64);
        let arg = t as f64 / freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Time embedding followed by the selected table row.
pub fn build_condition(
    t: usize,
    class_id: Option<usize>,
    table: &ConditioningTable,
    config: &DenoiserConfig,
) -> Result<Vec<f64>> {
    if t >= config.schedule.steps {
        return Err(CoreError::TimestepOutOfRange { t, len: config.schedule.steps }.into());
    }
    if table.dim() != config.condition_dim {
        return Err(CoreError::DimensionMismatch { expected: config.condition_dim, got: table.dim() }.into());
    }
    let mut z = sinusoidal_time_embedding(t, config.time_embed_dim)?;
    z.extend_from_slice(table.row(class_id)?);
    Ok(z)
}
