//! Downstream image classifiers trained on generated samples and scored on
//! real holdout images.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Module, Tensor, D};
use candle_nn::{Conv2d, GroupNorm, Linear};
use protoguide_core::metrics::{Averaging, ConfusionMatrix, EvalReport};
use protoguide_core::rng::{derive_seed, derived};
use protoguide_core::{Error as CoreError, ImageTensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::denoiser::images_to_tensor;
use crate::error::{ModelError, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::unet::{conv, group_norm, linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierPreset {
    /// Three conv blocks and a linear head; sized for 8x8 to 32x32 inputs.
    SmallCnnDesk,
    /// ResNeXt-50 (32x4d) layout with group normalization in place of batch norm.
    Resnext50Like,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub preset: ClassifierPreset,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            preset: ClassifierPreset::SmallCnnDesk,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::Config("classifier epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config("classifier learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Convolution split into independent channel groups. Each group is its own
/// dense convolution so the backward pass stays on well-supported kernels.
struct GroupedConv {
    parts: Vec<Conv2d>,
}

impl GroupedConv {
    fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize, stride: usize) -> Result<Self> {
        let width = channels / groups;
        let parts =
            (0..groups).map(|g| conv(ps, &format!("{name}.{g}"), width, width, 3, stride, 1)).collect::<Result<_>>()?;
        Ok(Self { parts })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.parts.len() == 1 {
            return Ok(self.parts[0].forward(x)?);
        }
        let chunks = x.chunk(self.parts.len(), 1)?;
        let outs = chunks.iter().zip(&self.parts).map(|(c, p)| p.forward(c)).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::cat(&outs, 1)?)
    }
}

struct Bottleneck {
    reduce: Conv2d,
    norm1: GroupNorm,
    grouped: GroupedConv,
    norm2: GroupNorm,
    expand: Conv2d,
    norm3: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl Bottleneck {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        width: usize,
        cout: usize,
        cardinality: usize,
        stride: usize,
    ) -> Result<Self> {
        let shortcut = if cin != cout || stride != 1 {
            Some((
                conv(ps, &format!("{name}.shortcut"), cin, cout, 1, stride, 1)?,
                group_norm(ps, &format!("{name}.shortcut_norm"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            reduce: conv(ps, &format!("{name}.reduce"), cin, width, 1, 1, 1)?,
            norm1: group_norm(ps, &format!("{name}.norm1"), width)?,
            grouped: GroupedConv::new(ps, &format!("{name}.grouped"), width, cardinality, stride)?,
            norm2: group_norm(ps, &format!("{name}.norm2"), width)?,
            expand: conv(ps, &format!("{name}.expand"), width, cout, 1, 1, 1)?,
            norm3: group_norm(ps, &format!("{name}.norm3"), cout)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.reduce.forward(x)?)?.relu()?;
        let h = self.norm2.forward(&self.grouped.forward(&h)?)?.relu()?;
        let h = self.norm3.forward(&self.expand.forward(&h)?)?;
        let s = match &self.shortcut {
            Some((c, n)) => n.forward(&c.forward(x)?)?,
            None => x.clone(),
        };
        Ok((h + s)?.relu()?)
    }
}

enum Net {
    Small { convs: Vec<(Conv2d, GroupNorm)>, head: Linear },
    ResNeXt { stem: Conv2d, stem_norm: GroupNorm, blocks: Vec<Bottleneck>, head: Linear },
}

fn build(ps: &mut ParamStore, preset: ClassifierPreset, in_channels: usize, classes: usize) -> Result<Net> {
    match preset {
        ClassifierPreset::SmallCnnDesk => {
            let widths = [in_channels, 16, 32, 64];
            let convs = (0..3)
                .map(|i| {
                    Ok((
                        conv(ps, &format!("conv.{i}"), widths[i], widths[i + 1], 3, 1, 1)?,
                        group_norm(ps, &format!("norm.{i}"), widths[i + 1])?,
                    ))
                })
                .collect::<Result<_>>()?;
            let head = linear(ps, "head", 64, classes)?;
            Ok(Net::Small { convs, head })
        }
        ClassifierPreset::Resnext50Like => {
            let stem = conv(ps, "stem", in_channels, 64, 7, 2, 1)?;
            let stem_norm = group_norm(ps, "stem_norm", 64)?;
            let mut blocks = Vec::new();
            let mut cin = 64;
            for (stage, (&depth, width)) in [3usize, 4, 6, 3].iter().zip([128usize, 256, 512, 1024]).enumerate() {
                let cout = width * 2;
                for b in 0..depth {
                    let stride = if b == 0 && stage > 0 { 2 } else { 1 };
                    blocks.push(Bottleneck::new(ps, &format!("stage.{stage}.{b}"), cin, width, cout, 32, stride)?);
                    cin = cout;
                }
            }
            let head = linear(ps, "head", cin, classes)?;
            Ok(Net::ResNeXt { stem, stem_norm, blocks, head })
        }
    }
}

impl Net {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Net::Small { convs, head } => {
                let mut h = x.clone();
                for (i, (c, n)) in convs.iter().enumerate() {
                    h = n.forward(&c.forward(&h)?)?.relu()?;
                    let (_, _, hh, ww) = h.dims4()?;
                    if i < 2 && hh >= 2 && ww >= 2 {
                        h = h.max_pool2d(2)?;
                    }
                }
                Ok(head.forward(&h.mean(D::Minus1)?.mean(D::Minus1)?)?)
            }
            Net::ResNeXt { stem, stem_norm, blocks, head } => {
                let mut h = stem_norm.forward(&stem.forward(x)?)?.relu()?;
                let (_, _, hh, ww) = h.dims4()?;
                if hh >= 2 && ww >= 2 {
                    h = h.max_pool2d(2)?;
                }
                for b in blocks {
                    h = b.forward(&h)?;
                }
                Ok(head.forward(&h.mean(D::Minus1)?.mean(D::Minus1)?)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSidecar {
    pub schema_version: u32,
    pub weights: String,
    pub config: ClassifierConfig,
    pub in_channels: usize,
    pub num_classes: usize,
    pub seed: u64,
}

pub struct Classifier {
    config: ClassifierConfig,
    in_channels: usize,
    num_classes: usize,
    seed: u64,
    params: ParamStore,
    net: Net,
}

impl Classifier {
    pub fn new(config: ClassifierConfig, in_channels: usize, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(ModelError::Config("a classifier needs at least two classes".into()));
        }
        let mut params = ParamStore::new(derive_seed(seed, &[0]), Device::Cpu);
        let net = build(&mut params, config.preset, in_channels, num_classes)?;
        Ok(Self { config, in_channels, num_classes, seed, params, net })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_elements()
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.net.forward(x)
    }

    pub fn predict(&self, images: &[ImageTensor]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.config.batch_size.max(1)) {
            let x = images_to_tensor(chunk, self.params.device())?;
            let idx = self.logits(&x)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
            out.extend(idx.into_iter().map(|i| i as usize));
        }
        Ok(out)
    }

    /// Writes `<stem>.safetensors` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let weights = format!("{stem}.safetensors");
        let tmp = dir.join(format!("{weights}.tmp"));
        candle_core::safetensors::save(&self.params.tensors(), &tmp)?;
        fs::rename(&tmp, dir.join(&weights))?;
        let sidecar = ClassifierSidecar {
            schema_version: 1,
            weights,
            config: self.config.clone(),
            in_channels: self.in_channels,
            num_classes: self.num_classes,
            seed: self.seed,
        };
        let path = dir.join(format!("{stem}.json"));
        let mut json = serde_json::to_vec_pretty(&sidecar)?;
        json.push(b'\n');
        protoguide_core::fsutil::write_atomic(&path, &json)?;
        Ok(path)
    }

    pub fn load(sidecar_path: &Path) -> Result<Self> {
        let sidecar: ClassifierSidecar = serde_json::from_slice(&fs::read(sidecar_path)?)?;
        if sidecar.schema_version != 1 {
            return Err(ModelError::Checkpoint(format!("unsupported schema version {}", sidecar.schema_version)));
        }
        let dir = sidecar_path.parent().unwrap_or(Path::new("."));
        let tensors = candle_core::safetensors::load(dir.join(&sidecar.weights), &Device::Cpu)?;
        let c = Self::new(sidecar.config, sidecar.in_channels, sidecar.num_classes, sidecar.seed)?;
        c.params.load(&tensors)?;
        Ok(c)
    }
}

/// Trains from scratch with seeded shuffling; returns the model and the mean loss of each epoch.
pub fn train_classifier(
    images: &[ImageTensor],
    labels: &[usize],
    num_classes: usize,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(Classifier, Vec<f64>)> {
    let first = images.first().ok_or(CoreError::EmptyBatch)?;
    if images.len() != labels.len() {
        return Err(CoreError::DimensionMismatch { expected: images.len(), got: labels.len() }.into());
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(CoreError::UnknownClass(bad).into());
    }
    let model = Classifier::new(config.clone(), first.shape()[0], num_classes, seed)?;
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = derived(seed, &[1]);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<ImageTensor> = chunk.iter().map(|&i| images[i].clone()).collect();
            let x = images_to_tensor(&batch, model.params.device())?;
            let y: Vec<u32> = chunk.iter().map(|&i| labels[i] as u32).collect();
            let y = Tensor::from_vec(y, chunk.len(), model.params.device())?;
            let loss = candle_nn::loss::cross_entropy(&model.logits(&x)?, &y)?;
            total += loss.to_scalar::<f32>()? as f64 * chunk.len() as f64;
            opt.step(&model.params, &loss.backward()?)?;
        }
        let mean = total / images.len() as f64;
        if !mean.is_finite() {
            return Err(CoreError::NonFinite("classifier loss").into());
        }
        history.push(mean);
    }
    Ok((model, history))
}

/// Scores `classifier` on labelled images.
pub fn evaluate(
    classifier: &Classifier,
    images: &[ImageTensor],
    labels: &[usize],
    class_names: &[String],
    label: &str,
    seed: u64,
) -> Result<EvalReport> {
    let predicted = classifier.predict(images)?;
    let matrix = ConfusionMatrix::from_predictions(labels, &predicted, classifier.num_classes())?;
    let mut report = EvalReport::from_confusion(label, &matrix, class_names, Averaging::Macro, seed)?;
    report.config = serde_json::to_value(classifier.config())?;
    Ok(report)
}
