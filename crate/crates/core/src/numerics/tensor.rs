//! Dense row-major tensors of rank 0..=2.
//!
//! Every weight matrix, activation and gradient in the crate is one of
//! these. Rank 2 is the workhorse; rank 1 covers biases and logit vectors,
//! rank 0 scalar losses.

use alloc::vec;
use alloc::vec::Vec;

use super::real::Real;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> TensorValue<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(data.len(), n, "tensor data length must equal shape product");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::ZERO; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    /// Gaussian init, mean 0, given std; the usual init for fresh heads.
    pub fn randn(shape: &[usize], std: T, rng: &mut super::rng::RngStream) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.normal_f64()) * std).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix tensor");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix tensor");
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// The single element of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on multi-element tensor");
        self.data[0]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(CoreError::numeric(alloc::format!(
                "non-finite value in {what}"
            )))
        }
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> TensorValue<U> {
        TensorValue {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> TensorValue<f64> {
        self.map(|v| v.to_f64())
    }

    pub fn to_f32(&self) -> TensorValue<f32> {
        self.map(|v| v.to_f64() as f32)
    }

    /// In-place `self += other` (shapes must match).
    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_agree() {
        let t = TensorValue::<f32>::zeros(&[3, 4]);
        assert_eq!(t.len(), 12);
        assert_eq!(t.rows(), 3);
        assert_eq!(t.cols(), 4);
        assert!(t.all_finite());
    }

    #[test]
    #[should_panic(expected = "tensor data length")]
    fn mismatched_data_panics() {
        let _ = TensorValue::new(vec![2, 2], vec![0.0f32; 3]);
    }

    #[test]
    fn finite_check_catches_nan() {
        let t = TensorValue::vector(vec![1.0f64, f64::NAN]);
        assert!(t.ensure_finite("test").is_err());
    }
}
