//! Procedural class-foldered corpora for smoke runs and tests.

use std::fs;
use std::path::Path;

use protoguide_core::rng::derived;
use protoguide_core::ImageTensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};
use crate::image_io::{normalize, save_png};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Pattern {
    /// Every pixel set to one gray level.
    Solid(u8),
    /// Brightness ramp along x with random contrast and pixel noise.
    HorizontalRamp,
    /// Brightness ramp along y with random contrast and pixel noise.
    VerticalRamp,
}

fn render(pattern: Pattern, size: usize, rng: &mut impl Rng) -> ImageTensor {
    let mut data = Vec::with_capacity(3 * size * size);
    let denom = (size.max(2) - 1) as f64;
    let (contrast, offset) = (rng.gen_range(0.6..1.0), rng.gen_range(-0.15..0.15));
    for _ in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let v = match pattern {
                    Pattern::Solid(p) => normalize(p),
                    Pattern::HorizontalRamp => contrast * (2.0 * x as f64 / denom - 1.0) + offset,
                    Pattern::VerticalRamp => contrast * (2.0 * y as f64 / denom - 1.0) + offset,
                };
                data.push(v);
            }
        }
    }
    if !matches!(pattern, Pattern::Solid(_)) {
        for v in &mut data {
            *v = (*v + rng.gen_range(-0.05..0.05)).clamp(-1.0, 1.0);
        }
    }
    ImageTensor::new([3, size, size], data).expect("sized above")
}

/// Writes `per_class` PNGs of side `size` under `root/<class>/`.
pub fn write_dataset(root: &Path, classes: &[(&str, Pattern)], per_class: usize, size: usize, seed: u64) -> Result<()> {
    for (ci, (name, pattern)) in classes.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
        let mut rng = derived(seed, &[ci as u64]);
        for i in 0..per_class {
            save_png(&dir.join(format!("{name}_{i:04}.png")), &render(*pattern, size, &mut rng))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramps_are_oriented() {
        let mut rng = derived(0, &[]);
        let h = render(Pattern::HorizontalRamp, 8, &mut rng);
        let v = render(Pattern::VerticalRamp, 8, &mut rng);
        assert!(h.data()[7] > h.data()[0] + 0.8);
        assert!(v.data()[56] > v.data()[0] + 0.8);
        assert!(h.data().iter().chain(v.data()).all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn writes_deterministic_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let classes = [("h", Pattern::HorizontalRamp), ("v", Pattern::VerticalRamp)];
        write_dataset(a.path(), &classes, 3, 8, 5).unwrap();
        write_dataset(b.path(), &classes, 3, 8, 5).unwrap();
        for f in ["h/h_0000.png", "v/v_0002.png"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
}
