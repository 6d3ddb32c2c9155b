mod common;
use common as fixture;

use std::collections::VecDeque;

use candle_core::{Device, Tensor};
use protoguide_core::diffusion::NoiseSchedule;
use protoguide_core::{Codebook, ImageTensor};
use protoguide_model::denoiser::{images_to_tensor, ParameterCount, CLASS_EMBEDDINGS};
use protoguide_model::optim::{AdamW, AdamWConfig};
use protoguide_model::*;
use rand_chacha::ChaCha8Rng;

fn desk_codebook(dim: usize) -> Codebook {
    let protos: Vec<f64> = (0..2 * dim).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.173).collect();
    Codebook::new(vec![0, 1], 1, dim, 1.0, protos).unwrap()
}

fn tiny_config() -> DenoiserConfig {
    DenoiserConfig { dropout: 0.0, ..DenoiserConfig::desk() }
}

#[test]
fn output_shape_matches_input_at_desk_size() {
    let cfg = DenoiserConfig::desk();
    let table = init_random(2, cfg.condition_dim, 1).unwrap();
    let model = Denoiser::new(cfg, table, 0).unwrap();
    let x = ImageTensor::filled([3, 8, 8], 0.3);
    for class in [Some(0), Some(1), None] {
        let eps = model.predict_noise(&x, 17, class).unwrap();
        assert_eq!(eps.shape(), [3, 8, 8]);
        assert!(eps.is_finite());
    }
}

#[test]
fn output_shape_matches_input_at_full_size() {
    let cfg = DenoiserConfig::default();
    let table = init_random(2, cfg.condition_dim, 1).unwrap();
    let model = Denoiser::new(cfg, table, 0).unwrap();
    let x = ImageTensor::filled([3, 64, 64], -0.2);
    let eps = model.predict_noise(&x, 999, Some(1)).unwrap();
    assert_eq!(eps.shape(), [3, 64, 64]);
}

#[test]
fn rejects_bad_inputs() {
    let cfg = DenoiserConfig::desk();
    let steps = cfg.schedule.steps;
    let model = Denoiser::new(cfg.clone(), init_random(2, cfg.condition_dim, 1).unwrap(), 0).unwrap();
    let x = ImageTensor::zeros([3, 8, 8]);
    assert!(model.predict_noise(&ImageTensor::zeros([3, 16, 16]), 0, Some(0)).is_err());
    assert!(model.predict_noise(&x, steps, Some(0)).is_err());
    assert!(model.predict_noise(&x, 0, Some(2)).is_err());
    assert!(Denoiser::new(cfg, init_random(2, 5, 1).unwrap(), 0).is_err());
}

#[test]
fn conditioning_modes_share_architecture_and_initial_weights() {
    let cfg = DenoiserConfig::desk();
    let frozen = Denoiser::new(cfg.clone(), init_from_prototypes(&desk_codebook(12), 12).unwrap(), 5).unwrap();
    let trainable = Denoiser::new(cfg.clone(), init_random(2, 12, 9).unwrap(), 5).unwrap();
    let table = 3 * 12;
    let ParameterCount { total: ft, trainable: fr } = frozen.parameter_count();
    let ParameterCount { total: tt, trainable: tr } = trainable.parameter_count();
    assert_eq!(ft, tt);
    assert_eq!(fr + table, tr);
    for (name, var) in frozen.params().vars() {
        let other = trainable.params().get(name).unwrap();
        let a = var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = other.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn frozen_table_is_untouched_by_training() {
    let cfg = tiny_config();
    let codebook = desk_codebook(cfg.condition_dim);
    let table = init_from_prototypes(&codebook, cfg.condition_dim).unwrap();
    let before = table.to_le_bytes();
    let mut trainer = DiffusionTrainer::new(cfg, table, 11).unwrap();
    let (images, labels) = fixture::toy_images();
    let data = TrainData::new(images, labels).unwrap();
    let snapshot = |t: &DiffusionTrainer| {
        t.denoiser().params().get("conv_in.weight").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()
    };
    let start = snapshot(&trainer);
    while trainer.steps() < 100 {
        trainer.train_epoch(&data).unwrap();
    }
    assert_eq!(trainer.denoiser().conditioning_table().unwrap().to_le_bytes(), before);
    let live: Vec<f64> = trainer.denoiser().table_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap().into_iter().map(f64::from).collect();
    let expected: Vec<f64> = trainer.denoiser().conditioning_table().unwrap().rows().iter().map(|&v| v as f32 as f64).collect();
    assert_eq!(live, expected);
    assert_ne!(snapshot(&trainer), start, "network weights should train");
}

#[test]
fn trainable_table_moves_after_one_step() {
    let cfg = tiny_config();
    let table = init_random(2, cfg.condition_dim, 4).unwrap();
    let before = table.rows().to_vec();
    let model = Denoiser::new(cfg.clone(), table, 0).unwrap();
    let schedule = cfg.schedule.build().unwrap();
    let mut opt = AdamW::new(AdamWConfig { learning_rate: 1e-3, weight_decay: 0.0, ..AdamWConfig::default() });
    let mut rng = protoguide_core::rng::seeded(1);
    let (images, labels) = fixture::toy_images();
    model.training_step(&images, &labels, &schedule, 0.0, &mut opt, &mut rng).unwrap();
    let after = model.conditioning_table().unwrap();
    assert_ne!(after.rows(), &before[..]);
}

#[test]
fn unconditional_batches_give_class_rows_no_gradient() {
    let cfg = tiny_config();
    let model = Denoiser::new(cfg.clone(), init_random(2, cfg.condition_dim, 4).unwrap(), 0).unwrap();
    let schedule = cfg.schedule.build().unwrap();
    let mut rng = protoguide_core::rng::seeded(2);
    let (images, labels) = fixture::toy_images();
    let loss = diffusion_loss(&model, &images, &labels, &schedule, 1.0, &mut rng).unwrap();
    let grads = loss.backward().unwrap();
    let var = model.params().get(CLASS_EMBEDDINGS).unwrap();
    let g = grads.get(var.as_tensor()).unwrap().to_vec2::<f32>().unwrap();
    assert!(g[0].iter().chain(&g[1]).all(|&v| v == 0.0));
    assert!(g[2].iter().any(|&v| v != 0.0));
}

/// Recovers the exact noise from `x_t` given the one clean image it was built from.
struct Oracle {
    x0: ImageTensor,
    schedule: NoiseSchedule,
}

impl NoisePredictor for Oracle {
    fn predict_batch(
        &self,
        x_t: &Tensor,
        timesteps: &[usize],
        _classes: &[Option<usize>],
        _rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let xs = protoguide_model::denoiser::tensor_to_images(x_t)?;
        let eps: Vec<ImageTensor> = xs
            .iter()
            .zip(timesteps)
            .map(|(x, &t)| {
                let ab = self.schedule.alpha_bars()[t];
                x.zip_map(&self.x0, |xt, x0| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt()).unwrap()
            })
            .collect();
        images_to_tensor(&eps, &Device::Cpu)
    }
}

struct Zero;

impl NoisePredictor for Zero {
    fn predict_batch(&self, x_t: &Tensor, _: &[usize], _: &[Option<usize>], _: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        Ok(x_t.zeros_like()?)
    }
}

#[test]
fn loss_is_zero_for_perfect_predictor_and_one_for_zero_predictor() {
    let schedule = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let x0 = ImageTensor::filled([3, 8, 8], 0.25);
    let batch = vec![x0.clone(); 64];
    let labels = vec![0; 64];
    let mut rng = protoguide_core::rng::seeded(3);
    let oracle = Oracle { x0, schedule: schedule.clone() };
    let l = diffusion_loss(&oracle, &batch, &labels, &schedule, 0.1, &mut rng).unwrap().to_scalar::<f32>().unwrap();
    assert!(l < 1e-6, "{l}");
    let l = diffusion_loss(&Zero, &batch, &labels, &schedule, 0.1, &mut rng).unwrap().to_scalar::<f32>().unwrap();
    // Mean of 12288 squared standard normals.
    assert!((l - 1.0).abs() < 0.05, "{l}");
}

#[test]
fn overfits_eight_images() {
    let cfg = DenoiserConfig::desk();
    let table = init_random(2, cfg.condition_dim, 3).unwrap();
    let mut trainer = DiffusionTrainer::new(cfg, table, 7).unwrap();
    let (images, labels) = fixture::toy_images();
    let data = TrainData::new(images, labels).unwrap();
    let mut window = VecDeque::new();
    let mut reached = None;
    while trainer.steps() < 2000 {
        for m in trainer.train_epoch(&data).unwrap() {
            window.push_back(m.loss);
            if window.len() > 50 {
                window.pop_front();
            }
        }
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        if window.len() == 50 && mean < 0.1 {
            reached = Some(trainer.steps());
            break;
        }
    }
    assert!(reached.is_some(), "50-step mean loss stayed above 0.1 for 2000 steps");
}
