use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `[channels, height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LatentError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Shape, Shape),
    #[error("expected {expected} values for {shape:?}, got {got}")]
    Length { shape: Shape, expected: usize, got: usize },
    #[error("latent values must be finite")]
    NotFinite,
}

/// Real-valued `[channels × height × width]` tensor, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    shape: Shape,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self, LatentError> {
        if data.len() != shape.len() {
            return Err(LatentError::Length { shape, expected: shape.len(), got: data.len() });
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(LatentError::NotFinite);
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    pub fn ensure_shape(&self, other: &LatentGrid) -> Result<(), LatentError> {
        if self.shape != other.shape {
            return Err(LatentError::ShapeMismatch(self.shape, other.shape));
        }
        Ok(())
    }

    /// `a·self + b·other`, elementwise.
    pub fn axpby(&self, a: f64, other: &LatentGrid, b: f64) -> Result<LatentGrid, LatentError> {
        self.ensure_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Ok(LatentGrid { shape: self.shape, data })
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> Result<f64, LatentError> {
        self.ensure_shape(other)?;
        Ok(crate::ndkernel::max_abs_diff(&self.data, &other.data))
    }

    /// Root-mean-square value.
    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|x| x * x).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    /// `(min, max)` over all entries.
    pub fn range(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_major_indexing() {
        let g = LatentGrid::from_fn(Shape::new(2, 3, 4), |c, y, x| (c * 100 + y * 10 + x) as f64);
        assert_eq!(g.get(1, 2, 3), 123.0);
        assert_eq!(g.data()[g.index(1, 0, 1)], 101.0);
    }

    #[test]
    fn rejects_bad_input() {
        let s = Shape::new(1, 2, 2);
        assert!(matches!(LatentGrid::new(s, vec![0.0; 3]), Err(LatentError::Length { .. })));
        assert_eq!(LatentGrid::new(s, vec![0.0, 1.0, f64::NAN, 0.0]), Err(LatentError::NotFinite));
        let other = LatentGrid::zeros(Shape::new(1, 2, 3));
        assert!(LatentGrid::zeros(s).axpby(1.0, &other, 1.0).is_err());
    }
}
