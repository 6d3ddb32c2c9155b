use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A channels-first image (or any 3-d array) of `f64` values.
///
/// Pixel data is expected in [-1, 1] once normalized; the diffusion routines do
/// not enforce that, since noised states leave the range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 3], value: f64) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self::filled(shape, 0.0)
    }

    /// A single-element tensor, handy for scalar checks of the update rules.
    pub fn scalar(value: f64) -> Self {
        Self { shape: [1, 1, 1], data: vec![value] }
    }

    /// Per-element standard normal draw.
    pub fn standard_normal<R: Rng + ?Sized>(shape: [usize; 3], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_vec(),
                got: other.shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Element-wise combination of two tensors of equal shape.
    pub fn zip_map(&self, other: &ImageTensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(ImageTensor::new([3, 2, 2], vec![0.0; 11]).is_err());
        assert!(ImageTensor::new([3, 2, 2], vec![0.0; 12]).is_ok());
    }

    #[test]
    fn zip_map_checks_shape() {
        let a = ImageTensor::zeros([1, 2, 2]);
        let b = ImageTensor::zeros([1, 4, 1]);
        assert!(matches!(a.zip_map(&b, |x, y| x + y), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn normal_draw_is_seed_deterministic() {
        let a = ImageTensor::standard_normal([3, 4, 4], &mut crate::rng::seeded(3));
        let b = ImageTensor::standard_normal([3, 4, 4], &mut crate::rng::seeded(3));
        assert_eq!(a, b);
        assert!(a.is_finite());
    }
}
