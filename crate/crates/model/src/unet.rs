//! Conditional UNet noise predictor: ResNet blocks at every resolution with
//! strided-conv downsampling and nearest-neighbour upsampling, no attention.
//! The condition vector (time embedding ++ class embedding) is projected by a
//! small MLP and added to the hidden state of every ResNet block.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Linear};
use protoguide_core::ScheduleConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub resnet_blocks_per_level: usize,
    pub dropout: f64,
    pub time_embed_dim: usize,
    /// Width of a class embedding row; equals the codebook dimension in prototype mode.
    pub condition_dim: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Probability of replacing the class with the null row during training.
    pub uncond_prob: f64,
    pub schedule: ScheduleConfig,
    pub checkpoint_every_epochs: usize,
}

fn default_checkpoint_every() -> usize {
    100
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            in_channels: 3,
            out_channels: 3,
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4, 8],
            resnet_blocks_per_level: 2,
            dropout: 0.1,
            time_embed_dim: 256,
            condition_dim: 768,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            epochs: 1500,
            batch_size: 16,
            uncond_prob: 0.1,
            schedule: ScheduleConfig::default(),
            checkpoint_every_epochs: default_checkpoint_every(),
        }
    }
}

impl DenoiserConfig {
    /// Small preset for CPU tests: 8 px inputs, 16 base channels, two levels, 200 steps.
    pub fn desk() -> Self {
        Self {
            input_size: 8,
            base_channels: 16,
            channel_multipliers: vec![1, 2],
            time_embed_dim: 64,
            condition_dim: 12,
            learning_rate: 1e-3,
            epochs: 2000,
            batch_size: 8,
            schedule: ScheduleConfig { steps: 200, ..ScheduleConfig::default() },
            checkpoint_every_epochs: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel multipliers must be non-empty and positive".into());
        }
        let factor = 1usize << (self.channel_multipliers.len() - 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return bad(format!("input size {} is not divisible by {factor}", self.input_size));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.resnet_blocks_per_level == 0 {
            return bad("need at least one ResNet block per level".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return bad("time embedding width must be even and positive".into());
        }
        if self.condition_dim == 0 {
            return bad("condition width must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return bad(format!("uncond_prob must be in [0, 1], got {}", self.uncond_prob));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return bad("learning rate, batch size and epochs must be positive".into());
        }
        self.schedule.build()?;
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.in_channels, self.input_size, self.input_size]
    }
}

fn group_count(channels: usize) -> usize {
    [32, 16, 8, 4, 2].into_iter().find(|g| channels.is_multiple_of(*g) && *g <= channels / 2).unwrap_or(1)
}

pub(crate) fn conv(
    ps: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
) -> Result<Conv2d> {
    let fan_in = (cin / groups) * kernel * kernel;
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = ps.uniform(format!("{name}.weight"), &[cout, cin / groups, kernel, kernel], bound)?;
    let b = ps.uniform(format!("{name}.bias"), &[cout], bound)?;
    let cfg = Conv2dConfig { padding: kernel / 2, stride, groups, ..Default::default() };
    Ok(Conv2d::new(w, Some(b), cfg))
}

pub(crate) fn linear(ps: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<Linear> {
    let bound = 1.0 / (din as f64).sqrt();
    let w = ps.uniform(format!("{name}.weight"), &[dout, din], bound)?;
    let b = ps.uniform(format!("{name}.bias"), &[dout], bound)?;
    Ok(Linear::new(w, Some(b)))
}

pub(crate) fn group_norm(ps: &mut ParamStore, name: &str, channels: usize) -> Result<GroupNorm> {
    let w = ps.constant(format!("{name}.weight"), &[channels], 1.0)?;
    let b = ps.constant(format!("{name}.bias"), &[channels], 0.0)?;
    Ok(GroupNorm::new(w, b, channels, group_count(channels), 1e-5)?)
}

/// Inverted dropout with masks drawn from the caller's stream. `None` is inference.
pub(crate) fn dropout(x: &Tensor, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    let Some(rng) = rng else { return Ok(x.clone()) };
    if p == 0.0 {
        return Ok(x.clone());
    }
    let scale = (1.0 / (1.0 - p)) as f32;
    let mask: Vec<f32> = (0..x.elem_count()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale }).collect();
    let mask = Tensor::from_vec(mask, x.dims(), x.device())?;
    Ok(x.mul(&mask)?)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    cond_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    dropout: f64,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, cond_width: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(ps, &format!("{name}.norm1"), cin)?,
            conv1: conv(ps, &format!("{name}.conv1"), cin, cout, 3, 1, 1)?,
            cond_proj: linear(ps, &format!("{name}.cond_proj"), cond_width, cout)?,
            norm2: group_norm(ps, &format!("{name}.norm2"), cout)?,
            conv2: conv(ps, &format!("{name}.conv2"), cout, cout, 3, 1, 1)?,
            skip: if cin != cout { Some(conv(ps, &format!("{name}.skip"), cin, cout, 1, 1, 1)?) } else { None },
            dropout,
        })
    }

    /// `cond` is the activated condition embedding, shape `(N, cond_width)`.
    fn forward(&self, x: &Tensor, cond: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let c = self.cond_proj.forward(cond)?.unsqueeze(D::Minus1)?.unsqueeze(D::Minus1)?;
        let h = h.broadcast_add(&c)?;
        let h = self.norm2.forward(&h)?.silu()?;
        let h = self.conv2.forward(&dropout(&h, self.dropout, rng)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

struct Level {
    blocks: Vec<ResBlock>,
    resample: Option<Conv2d>,
}

pub struct UNet {
    cond_in: Linear,
    cond_hidden: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    mid: Vec<ResBlock>,
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(ps: &mut ParamStore, cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let width = cfg.time_embed_dim;
        let z_dim = cfg.time_embed_dim + cfg.condition_dim;
        let cond_in = linear(ps, "cond.in", z_dim, width)?;
        let cond_hidden = linear(ps, "cond.hidden", width, width)?;
        let base = cfg.base_channels;
        let conv_in = conv(ps, "conv_in", cfg.in_channels, base, 3, 1, 1)?;

        let levels = cfg.channel_multipliers.len();
        let mut ch = base;
        let mut skips = vec![ch];
        let mut down = Vec::with_capacity(levels);
        for (i, m) in cfg.channel_multipliers.iter().enumerate() {
            let out = base * m;
            let mut blocks = Vec::new();
            for r in 0..cfg.resnet_blocks_per_level {
                blocks.push(ResBlock::new(ps, &format!("down.{i}.res.{r}"), ch, out, width, cfg.dropout)?);
                ch = out;
                skips.push(ch);
            }
            let resample = if i + 1 < levels {
                skips.push(ch);
                Some(conv(ps, &format!("down.{i}.downsample"), ch, ch, 3, 2, 1)?)
            } else {
                None
            };
            down.push(Level { blocks, resample });
        }

        let mid = vec![
            ResBlock::new(ps, "mid.res.0", ch, ch, width, cfg.dropout)?,
            ResBlock::new(ps, "mid.res.1", ch, ch, width, cfg.dropout)?,
        ];

        let mut up = Vec::with_capacity(levels);
        for (i, m) in cfg.channel_multipliers.iter().enumerate().rev() {
            let out = base * m;
            let mut blocks = Vec::new();
            for r in 0..=cfg.resnet_blocks_per_level {
                let skip = skips.pop().expect("skip bookkeeping");
                blocks.push(ResBlock::new(ps, &format!("up.{i}.res.{r}"), ch + skip, out, width, cfg.dropout)?);
                ch = out;
            }
            let resample = if i > 0 { Some(conv(ps, &format!("up.{i}.upsample"), ch, ch, 3, 1, 1)?) } else { None };
            up.push(Level { blocks, resample });
        }
        debug_assert!(skips.is_empty());

        let norm_out = group_norm(ps, "norm_out", ch)?;
        let conv_out = conv(ps, "conv_out", ch, cfg.out_channels, 3, 1, 1)?;
        Ok(Self { cond_in, cond_hidden, conv_in, down, mid, up, norm_out, conv_out })
    }

    /// `x`: `(N, C, H, W)`; `z`: `(N, time_embed_dim + condition_dim)`.
    /// Passing an RNG enables dropout (training mode).
    pub fn forward(&self, x: &Tensor, z: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        if x.dtype() != DType::F32 {
            return Err(ModelError::Config("UNet expects f32 input".into()));
        }
        let cond = self.cond_hidden.forward(&self.cond_in.forward(z)?.silu()?)?.silu()?;
        let mut h = self.conv_in.forward(x)?;
        let mut skips = vec![h.clone()];
        for level in &self.down {
            for block in &level.blocks {
                h = block.forward(&h, &cond, rng.as_deref_mut())?;
                skips.push(h.clone());
            }
            if let Some(ds) = &level.resample {
                h = ds.forward(&h)?;
                skips.push(h.clone());
            }
        }
        for block in &self.mid {
            h = block.forward(&h, &cond, rng.as_deref_mut())?;
        }
        for level in &self.up {
            for block in &level.blocks {
                let skip = skips.pop().expect("skip bookkeeping");
                h = block.forward(&Tensor::cat(&[&h, &skip], 1)?, &cond, rng.as_deref_mut())?;
            }
            if let Some(us) = &level.resample {
                let (_, _, hh, ww) = h.dims4()?;
                h = us.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?)
    }
}
