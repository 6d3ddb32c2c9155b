//! Class-conditional generation with optional guidance.

use protoguide_core::diffusion::NoiseSchedule;
use protoguide_core::rng::derived;
use protoguide_core::sampling::{ddim_step, ddpm_step, guided_epsilon, SamplerSpec, SamplingMethod};
use protoguide_core::{Error as CoreError, ImageTensor};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{images_to_tensor, tensor_to_images, Denoiser, NoisePredictor};
use crate::error::Result;

/// One batch of `count` images for `class_id` (or unconditional when `None`).
/// The batch is a pure function of the model, the spec and `(spec.seed,
/// class, batch_index)`.
pub fn sample(
    model: &Denoiser,
    class_id: Option<usize>,
    count: usize,
    batch_index: u64,
    spec: &SamplerSpec,
    schedule: &NoiseSchedule,
) -> Result<Vec<ImageTensor>> {
    spec.validate(schedule.len())?;
    if count == 0 {
        return Ok(Vec::new());
    }
    if let Some(c) = class_id {
        if c >= model.num_classes() {
            return Err(CoreError::UnknownClass(c).into());
        }
    }
    let class_key = class_id.map_or(u64::MAX, |c| c as u64);
    let mut rng = derived(spec.seed, &[class_key, batch_index]);
    let shape = model.config().image_shape();
    let mut x: Vec<ImageTensor> = (0..count).map(|_| ImageTensor::standard_normal(shape, &mut rng)).collect();
    let timesteps = spec.timesteps(schedule.len())?;
    let guided = class_id.is_some() && spec.guidance_scale != 1.0;
    let device = model.params().device().clone();

    for (i, &t) in timesteps.iter().enumerate() {
        let xt = images_to_tensor(&x, &device)?;
        let ts = vec![t; count];
        let eps_c = tensor_to_images(&model.predict_batch(&xt, &ts, &vec![class_id; count], None)?)?;
        let eps = if guided {
            let eps_u = tensor_to_images(&model.predict_batch(&xt, &ts, &vec![None; count], None)?)?;
            eps_c
                .iter()
                .zip(&eps_u)
                .map(|(c, u)| guided_epsilon(c, u, spec.guidance_scale))
                .collect::<std::result::Result<Vec<_>, _>>()?
        } else {
            eps_c
        };
        x = match spec.method {
            SamplingMethod::Ddpm => step_all(&x, &eps, &mut rng, |xi, e, n| ddpm_step(xi, t, e, n, schedule), t > 0)?,
            SamplingMethod::Ddim => {
                let prev = timesteps.get(i + 1).copied();
                let stochastic = spec.eta > 0.0;
                step_all(&x, &eps, &mut rng, |xi, e, n| ddim_step(xi, t, prev, e, spec.eta, schedule, Some(n)), stochastic)?
            }
        };
    }
    Ok(x.iter().map(|img| img.clamp(-1.0, 1.0)).collect())
}

fn step_all(
    x: &[ImageTensor],
    eps: &[ImageTensor],
    rng: &mut ChaCha8Rng,
    step: impl Fn(&ImageTensor, &ImageTensor, &ImageTensor) -> protoguide_core::Result<ImageTensor>,
    draw_noise: bool,
) -> Result<Vec<ImageTensor>> {
    x.iter()
        .zip(eps)
        .map(|(xi, e)| {
            let noise = if draw_noise {
                ImageTensor::standard_normal(xi.shape(), rng)
            } else {
                ImageTensor::zeros(xi.shape())
            };
            Ok(step(xi, e, &noise)?)
        })
        .collect()
}

/// `count` images of one class, generated in batches of `spec.batch_size`.
pub fn sample_class(
    model: &Denoiser,
    class_id: usize,
    count: usize,
    spec: &SamplerSpec,
    schedule: &NoiseSchedule,
) -> Result<Vec<ImageTensor>> {
    let mut out = Vec::with_capacity(count);
    let mut batch = 0u64;
    while out.len() < count {
        let n = spec.batch_size.min(count - out.len());
        out.extend(sample(model, Some(class_id), n, batch, spec, schedule)?);
        batch += 1;
    }
    Ok(out)
}
