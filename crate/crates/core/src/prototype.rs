//! Class prototype codebook trained with distance-based cross-entropy plus a
//! prototype (compactness) loss.
//!
//! For an embedding `f` and prototypes `m_kl` (class `k`, slot `l`), the logits
//! are `-gamma * |f - m_kl|^2`; a softmax over all `C * K` logits gives the
//! assignment probabilities, and a class probability is the sum over that
//! class's `K` slots. The DCE loss is the negative log class probability and the
//! prototype loss is the squared distance to the nearest true-class prototype.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Smallest class probability fed to the log in the DCE loss.
pub const PROBABILITY_FLOOR: f64 = 1e-30;
const INIT_JITTER: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    class_ids: Vec<usize>,
    prototypes_per_class: usize,
    dim: usize,
    gamma: f64,
    /// Row-major `(C, K, D)`.
    prototypes: Vec<f64>,
}

impl Codebook {
    pub fn new(
        class_ids: Vec<usize>,
        prototypes_per_class: usize,
        dim: usize,
        gamma: f64,
        prototypes: Vec<f64>,
    ) -> Result<Self> {
        if class_ids.is_empty() {
            return Err(Error::InvalidConfig("codebook needs at least one class".into()));
        }
        if prototypes_per_class == 0 || dim == 0 {
            return Err(Error::InvalidConfig("prototypes per class and dimension must be positive".into()));
        }
        let unique: BTreeSet<_> = class_ids.iter().collect();
        if unique.len() != class_ids.len() {
            return Err(Error::InvalidConfig("class ids must be unique".into()));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        let expected = class_ids.len() * prototypes_per_class * dim;
        if prototypes.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: prototypes.len() });
        }
        if prototypes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prototypes"));
        }
        Ok(Self { class_ids, prototypes_per_class, dim, gamma, prototypes })
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn prototypes_per_class(&self) -> usize {
        self.prototypes_per_class
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn prototypes(&self) -> &[f64] {
        &self.prototypes
    }

    pub fn prototypes_mut(&mut self) -> &mut [f64] {
        &mut self.prototypes
    }

    pub fn class_index(&self, class_id: usize) -> Result<usize> {
        self.class_ids.iter().position(|&c| c == class_id).ok_or(Error::UnknownClass(class_id))
    }

    /// Prototype `slot` of the class at position `class_index`.
    pub fn prototype(&self, class_index: usize, slot: usize) -> &[f64] {
        let start = (class_index * self.prototypes_per_class + slot) * self.dim;
        &self.prototypes[start..start + self.dim]
    }

    /// The vector used to condition the denoiser for a class: its first prototype.
    pub fn conditioning_vector(&self, class_id: usize) -> Result<&[f64]> {
        Ok(self.prototype(self.class_index(class_id)?, 0))
    }

    /// Class of the nearest prototype; ties go to the lowest index.
    pub fn nearest_class(&self, f: &[f64]) -> Result<usize> {
        let d = self.distances(f)?;
        let mut best = 0;
        for (i, v) in d.iter().enumerate() {
            if *v < d[best] {
                best = i;
            }
        }
        Ok(self.class_ids[best / self.prototypes_per_class])
    }

    fn check_embedding(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: f.len() });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(())
    }

    /// Squared distances to every prototype, in `(C, K)` order.
    fn distances(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_embedding(f)?;
        Ok(self
            .prototypes
            .chunks_exact(self.dim)
            .map(|m| m.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect())
    }

    fn logits(&self, f: &[f64]) -> Result<Vec<f64>> {
        Ok(self.distances(f)?.into_iter().map(|d| -self.gamma * d).collect())
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax over `-gamma * d(f, m_kl)` for every prototype, shaped `(C, K)` row-major.
pub fn assignment_probabilities(f: &[f64], codebook: &Codebook) -> Result<Vec<f64>> {
    Ok(softmax(&codebook.logits(f)?))
}

pub fn class_probability(f: &[f64], class_id: usize, codebook: &Codebook) -> Result<f64> {
    let ci = codebook.class_index(class_id)?;
    let k = codebook.prototypes_per_class;
    let p = assignment_probabilities(f, codebook)?;
    Ok(p[ci * k..(ci + 1) * k].iter().sum::<f64>().min(1.0))
}

/// Loss value with gradients wrt the prototypes (`(C, K, D)`) and the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub prototypes: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Negative log class probability, computed in log-sum-exp form and capped at
/// `-ln(PROBABILITY_FLOOR)`.
pub fn dce_loss(f: &[f64], class_id: usize, codebook: &Codebook) -> Result<f64> {
    Ok(dce_loss_grad(f, class_id, codebook)?.loss)
}

pub fn dce_loss_grad(f: &[f64], class_id: usize, codebook: &Codebook) -> Result<LossGradient> {
    let ci = codebook.class_index(class_id)?;
    let (k, dim) = (codebook.prototypes_per_class, codebook.dim);
    let logits = codebook.logits(f)?;
    let own = &logits[ci * k..(ci + 1) * k];
    let log_p = (log_sum_exp(own) - log_sum_exp(&logits)).min(0.0);

    let mut prototypes = vec![0.0; codebook.prototypes.len()];
    let mut embedding = vec![0.0; dim];
    if log_p < PROBABILITY_FLOOR.ln() {
        return Ok(LossGradient { loss: -PROBABILITY_FLOOR.ln(), prototypes, embedding });
    }

    // dL/ds_kl = p_kl - q_kl, q the within-class softmax of the true class.
    let p = softmax(&logits);
    let q = softmax(own);
    let two_gamma = 2.0 * codebook.gamma;
    for (idx, m) in codebook.prototypes.chunks_exact(dim).enumerate() {
        let mut g = p[idx];
        if idx / k == ci {
            g -= q[idx % k];
        }
        if g == 0.0 {
            continue;
        }
        // ds/dm = 2 gamma (f - m), ds/df = -2 gamma (f - m)
        let dst = &mut prototypes[idx * dim..(idx + 1) * dim];
        for d in 0..dim {
            let diff = f[d] - m[d];
            dst[d] = g * two_gamma * diff;
            embedding[d] -= g * two_gamma * diff;
        }
    }
    Ok(LossGradient { loss: -log_p, prototypes, embedding })
}

fn nearest_slot(f: &[f64], ci: usize, codebook: &Codebook) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..codebook.prototypes_per_class {
        let d: f64 = codebook.prototype(ci, j).iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Squared distance from `f` to the nearest prototype of its class.
pub fn prototype_loss(f: &[f64], class_id: usize, codebook: &Codebook) -> Result<f64> {
    let ci = codebook.class_index(class_id)?;
    codebook.check_embedding(f)?;
    Ok(nearest_slot(f, ci, codebook).1)
}

pub fn prototype_loss_grad(f: &[f64], class_id: usize, codebook: &Codebook) -> Result<LossGradient> {
    let ci = codebook.class_index(class_id)?;
    codebook.check_embedding(f)?;
    let dim = codebook.dim;
    let (slot, loss) = nearest_slot(f, ci, codebook);
    let m = codebook.prototype(ci, slot);
    let mut prototypes = vec![0.0; codebook.prototypes.len()];
    let start = (ci * codebook.prototypes_per_class + slot) * dim;
    let embedding: Vec<f64> = f.iter().zip(m).map(|(a, b)| 2.0 * (a - b)).collect();
    for d in 0..dim {
        prototypes[start + d] = -embedding[d];
    }
    Ok(LossGradient { loss, prototypes, embedding })
}

/// Batch mean of `dce + lambda * pl`.
pub fn total_loss(batch: &[(&[f64], usize)], codebook: &Codebook, lambda: f64) -> Result<f64> {
    Ok(total_loss_grad(batch, codebook, lambda)?.loss)
}

/// Gradient of [`total_loss`]; `embeddings` holds one gradient per batch entry.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    pub prototypes: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
}

pub fn total_loss_grad(batch: &[(&[f64], usize)], codebook: &Codebook, lambda: f64) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut out = BatchGradient {
        loss: 0.0,
        prototypes: vec![0.0; codebook.prototypes.len()],
        embeddings: Vec::with_capacity(batch.len()),
    };
    for &(f, y) in batch {
        let dce = dce_loss_grad(f, y, codebook)?;
        let mut emb = dce.embedding;
        let mut loss = dce.loss;
        for (acc, g) in out.prototypes.iter_mut().zip(&dce.prototypes) {
            *acc += g / n;
        }
        if lambda != 0.0 {
            let pl = prototype_loss_grad(f, y, codebook)?;
            loss += lambda * pl.loss;
            for (acc, g) in out.prototypes.iter_mut().zip(&pl.prototypes) {
                *acc += lambda * g / n;
            }
            for (e, g) in emb.iter_mut().zip(&pl.embedding) {
                *e += lambda * g;
            }
        }
        out.loss += loss / n;
        out.embeddings.push(emb.into_iter().map(|g| g / n).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrototypeTrainConfig {
    pub gamma: f64,
    /// Weight of the prototype loss.
    pub lambda: f64,
    pub prototypes_per_class: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PrototypeTrainConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 0.01,
            prototypes_per_class: 1,
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 0,
            seed: 0,
        }
    }
}

impl PrototypeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if self.prototypes_per_class == 0 {
            return bad("prototypes_per_class must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedCodebook {
    pub codebook: Codebook,
    /// Full-dataset total loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Learns the codebook by minibatch gradient descent on the total loss. The
/// embeddings are fixed; only the prototypes move. Prototypes start at the
/// class means plus a small seeded jitter.
pub fn train_prototypes(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    class_ids: &[usize],
    config: &PrototypeTrainConfig,
) -> Result<TrainedCodebook> {
    config.validate()?;
    if class_ids.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "prototype training needs at least 2 classes, got {}",
            class_ids.len()
        )));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: embeddings.len(), got: labels.len() });
    }
    let dim = embeddings.first().map(Vec::len).ok_or(Error::EmptyBatch)?;
    if dim == 0 {
        return Err(Error::InvalidConfig("embeddings are empty vectors".into()));
    }
    for e in embeddings {
        if e.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: e.len() });
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
    }

    let k = config.prototypes_per_class;
    let mut sums = vec![0.0; class_ids.len() * dim];
    let mut counts = vec![0usize; class_ids.len()];
    for (e, &y) in embeddings.iter().zip(labels) {
        let ci = class_ids.iter().position(|&c| c == y).ok_or(Error::UnknownClass(y))?;
        counts[ci] += 1;
        for (s, v) in sums[ci * dim..(ci + 1) * dim].iter_mut().zip(e) {
            *s += v;
        }
    }
    if let Some(ci) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(class_ids[ci]));
    }
    if counts.iter().any(|&c| c != counts[0]) {
        log::warn!("unequal per-class sample counts: {counts:?}");
    }

    let mut rng = rng::seeded(config.seed);
    let jitter = Normal::new(0.0, INIT_JITTER).expect("valid normal");
    let mut prototypes = Vec::with_capacity(class_ids.len() * k * dim);
    for (ci, &n) in counts.iter().enumerate() {
        for _ in 0..k {
            for d in 0..dim {
                prototypes.push(sums[ci * dim + d] / n as f64 + jitter.sample(&mut rng));
            }
        }
    }
    let mut codebook = Codebook::new(class_ids.to_vec(), k, dim, config.gamma, prototypes)?;

    let all: Vec<(&[f64], usize)> = embeddings.iter().map(Vec::as_slice).zip(labels.iter().copied()).collect();
    let batch_size = if config.batch_size == 0 { all.len() } else { config.batch_size.min(all.len()) };
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| all[i]).collect();
            let grad = total_loss_grad(&batch, &codebook, config.lambda)?;
            for (m, g) in codebook.prototypes.iter_mut().zip(&grad.prototypes) {
                *m -= config.learning_rate * g;
            }
        }
        epoch_losses.push(total_loss(&all, &codebook, config.lambda)?);
    }
    Ok(TrainedCodebook { codebook, epoch_losses })
}

pub const CODEBOOK_SCHEMA_VERSION: u32 = 1;

/// JSON sidecar describing a codebook blob of little-endian `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookSidecar {
    pub schema_version: u32,
    pub num_classes: usize,
    pub prototypes_per_class: usize,
    pub dim: usize,
    pub gamma: f64,
    pub class_ids: Vec<usize>,
    pub class_names: Vec<String>,
    pub blob: String,
    pub dtype: String,
    pub train_config: Option<PrototypeTrainConfig>,
    pub seed: Option<u64>,
}

impl Codebook {
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.prototypes.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Writes `<stem>.bin` and `<stem>.json` into `dir`, each via temp-then-rename.
    pub fn save(
        &self,
        dir: &Path,
        stem: &str,
        class_names: &[String],
        train_config: Option<&PrototypeTrainConfig>,
    ) -> std::io::Result<PathBuf> {
        let blob = format!("{stem}.bin");
        let sidecar = CodebookSidecar {
            schema_version: CODEBOOK_SCHEMA_VERSION,
            num_classes: self.num_classes(),
            prototypes_per_class: self.prototypes_per_class,
            dim: self.dim,
            gamma: self.gamma,
            class_ids: self.class_ids.clone(),
            class_names: class_names.to_vec(),
            blob: blob.clone(),
            dtype: "f64le".into(),
            train_config: train_config.cloned(),
            seed: train_config.map(|c| c.seed),
        };
        fs::create_dir_all(dir)?;
        crate::fsutil::write_atomic(&dir.join(&blob), &self.to_le_bytes())?;
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_vec_pretty(&sidecar).map_err(std::io::Error::other)?;
        crate::fsutil::write_atomic(&json_path, &json)?;
        Ok(json_path)
    }

    /// Loads a codebook from its JSON sidecar path.
    pub fn load(sidecar_path: &Path) -> std::result::Result<(Self, CodebookSidecar), LoadError> {
        let sidecar: CodebookSidecar = serde_json::from_slice(&fs::read(sidecar_path)?)?;
        if sidecar.schema_version != CODEBOOK_SCHEMA_VERSION {
            return Err(LoadError::Format(format!("unsupported schema version {}", sidecar.schema_version)));
        }
        if sidecar.dtype != "f64le" {
            return Err(LoadError::Format(format!("unsupported dtype {}", sidecar.dtype)));
        }
        let dir = sidecar_path.parent().unwrap_or(Path::new("."));
        let bytes = fs::read(dir.join(&sidecar.blob))?;
        if bytes.len() % 8 != 0 {
            return Err(LoadError::Format("blob length is not a multiple of 8".into()));
        }
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let cb = Codebook::new(
            sidecar.class_ids.clone(),
            sidecar.prototypes_per_class,
            sidecar.dim,
            sidecar.gamma,
            values,
        )?;
        if cb.num_classes() != sidecar.num_classes {
            return Err(LoadError::Format("num_classes disagrees with class_ids".into()));
        }
        Ok((cb, sidecar))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] Error),
    #[error("{0}")]
    Format(String),
}
