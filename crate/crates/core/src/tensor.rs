use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `(channels, height, width)` array of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Shape { expected: vec![n], got: vec![data.len()] });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: [usize; 3], value: f64) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
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

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let w = self.shape[2];
        let h = self.shape[1];
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn ensure_shape(&self, other: &Tensor3) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape { expected: self.shape.to_vec(), got: other.shape.to_vec() });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sq_dist(&self, other: &Tensor3) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Maps `[0, 1]` pixel data to the `[-1, 1]` diffusion range.
    pub fn to_model_range(&self) -> Self {
        self.map(|v| v * 2.0 - 1.0)
    }

    /// Maps `[-1, 1]` back to `[0, 1]`, clamping overshoot.
    pub fn to_unit_range(&self) -> Self {
        self.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
    }
}
