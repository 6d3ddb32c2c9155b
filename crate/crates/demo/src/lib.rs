//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three operations: the cumulative noise schedule, forward noising of a
//! procedural image, and class-probability maps for a 2-D prototype codebook.

use protoguide_core::diffusion::{forward_marginal, NoiseSchedule};
use protoguide_core::prototype::{class_probability, Codebook};
use protoguide_core::rng::derived;
use protoguide_core::ImageTensor;
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, String>;

fn text(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Betas followed by cumulative alphas, `2 * steps` values in total.
#[wasm_bindgen]
pub fn schedule_curves(steps: usize, beta_start: f64, beta_end: f64) -> std::result::Result<Vec<f64>, JsError> {
    js(curves(steps, beta_start, beta_end))
}

/// RGBA pixels of the procedural image after `t` forward steps of a linear
/// schedule. The same seed always draws the same noise.
#[wasm_bindgen]
pub fn noised_image(
    size: usize,
    t: usize,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    seed: u32,
) -> std::result::Result<Vec<u8>, JsError> {
    js(noised(size, t, steps, beta_start, beta_end, u64::from(seed)))
}

/// RGBA map over `[-1, 1]^2` of class probabilities for a codebook with one
/// 2-D prototype per class. `prototypes` holds `x0, y0, x1, y1, ...`; each
/// pixel blends the class colours by probability.
#[wasm_bindgen]
pub fn prototype_map(prototypes: &[f64], gamma: f64, width: usize, height: usize) -> std::result::Result<Vec<u8>, JsError> {
    js(class_map(prototypes, gamma, width, height))
}

fn curves(steps: usize, beta_start: f64, beta_end: f64) -> Result<Vec<f64>> {
    let s = NoiseSchedule::linear(steps, beta_start, beta_end).map_err(text)?;
    Ok(s.betas().iter().chain(s.alpha_bars()).copied().collect())
}

/// Concentric rings in three colours, values in [-1, 1].
fn rings(size: usize) -> ImageTensor {
    let mut data = vec![0.0; 3 * size * size];
    let c = (size as f64 - 1.0) / 2.0;
    for y in 0..size {
        for x in 0..size {
            let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt() / c.max(1.0);
            let band = (r * 3.0 * std::f64::consts::PI).cos();
            let px = y * size + x;
            data[px] = band;
            data[size * size + px] = 1.0 - 2.0 * r.min(1.0);
            data[2 * size * size + px] = -band;
        }
    }
    ImageTensor::new([3, size, size], data).expect("shape matches data")
}

fn to_rgba(img: &ImageTensor) -> Vec<u8> {
    let [_, h, w] = img.shape();
    let d = img.data();
    let mut out = Vec::with_capacity(4 * h * w);
    for px in 0..h * w {
        for ch in 0..3 {
            let v = d[ch * h * w + px].clamp(-1.0, 1.0);
            out.push(((v + 1.0) * 127.5).round() as u8);
        }
        out.push(255);
    }
    out
}

fn noised(size: usize, t: usize, steps: usize, beta_start: f64, beta_end: f64, seed: u64) -> Result<Vec<u8>> {
    if size == 0 || size > 512 {
        return Err("size must be between 1 and 512".into());
    }
    let s = NoiseSchedule::linear(steps, beta_start, beta_end).map_err(text)?;
    let eps = ImageTensor::standard_normal([3, size, size], &mut derived(seed, &[]));
    Ok(to_rgba(&forward_marginal(&rings(size), t, &eps, &s).map_err(text)?))
}

const PALETTE: [[f64; 3]; 4] = [[230.0, 80.0, 60.0], [50.0, 120.0, 220.0], [60.0, 170.0, 90.0], [200.0, 160.0, 40.0]];

fn class_map(prototypes: &[f64], gamma: f64, width: usize, height: usize) -> Result<Vec<u8>> {
    let classes = prototypes.len() / 2;
    if !prototypes.len().is_multiple_of(2) || !(1..=PALETTE.len()).contains(&classes) {
        return Err("expected between 1 and 4 prototypes as x, y pairs".into());
    }
    let cb = Codebook::new((0..classes).collect(), 1, 2, gamma, prototypes.to_vec()).map_err(text)?;
    let mut out = Vec::with_capacity(4 * width * height);
    for py in 0..height {
        for px in 0..width {
            let f = [
                2.0 * (px as f64 + 0.5) / width as f64 - 1.0,
                1.0 - 2.0 * (py as f64 + 0.5) / height as f64,
            ];
            let mut rgb = [0.0; 3];
            for (c, colour) in PALETTE.iter().enumerate().take(classes) {
                let p = class_probability(&f, c, &cb).map_err(text)?;
                for k in 0..3 {
                    rgb[k] += p * colour[k];
                }
            }
            out.extend(rgb.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
            out.push(255);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_have_both_halves() {
        let v = curves(10, 1e-4, 0.02).unwrap();
        assert_eq!(v.len(), 20);
        assert_eq!(v[0], 1e-4);
        assert!((v[10] - (1.0 - 1e-4)).abs() < 1e-15);
        assert!(v[10..].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn noising_is_seeded_and_starts_from_the_clean_image() {
        let a = noised(16, 999, 1000, 1e-4, 0.02, 3).unwrap();
        assert_eq!(a.len(), 16 * 16 * 4);
        assert_eq!(a, noised(16, 999, 1000, 1e-4, 0.02, 3).unwrap());
        assert_ne!(a, noised(16, 999, 1000, 1e-4, 0.02, 4).unwrap());
        let clean = noised(16, 0, 1000, 1e-4, 0.02, 3).unwrap();
        let reference = to_rgba(&rings(16));
        let max_diff = clean.iter().zip(&reference).map(|(a, b)| a.abs_diff(*b)).max().unwrap();
        assert!(max_diff <= 6, "{max_diff}");
    }

    #[test]
    fn map_is_coloured_by_the_nearest_prototype() {
        let px = class_map(&[-0.5, 0.0, 0.5, 0.0], 20.0, 8, 2).unwrap();
        assert_eq!(px.len(), 8 * 2 * 4);
        // leftmost pixel is red, rightmost blue
        assert!(px[0] > 200 && px[2] < 70);
        assert!(px[28] < 60 && px[30] > 200);
        assert!(class_map(&[0.0, 0.0, 1.0], 1.0, 2, 2).is_err());
    }
}
