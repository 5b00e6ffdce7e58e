//! Dense row-major f64 tensor.
//!
//! All numerics in the crate run in 64-bit precision so that finite-difference
//! oracles have headroom; desk-scale problems never make speed the bottleneck.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::BadTensor {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.shape.clone())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of rows when the tensor is viewed as [rows, rest...].
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Flattened length of everything after the leading dimension.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret as [rows, cols] without touching data.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }
}

/// `p`-norm of a slice for p in {1, 2}.
pub fn norm_p(values: impl Iterator<Item = f64>, p: u8) -> f64 {
    match p {
        1 => values.map(f64::abs).sum(),
        2 => values.map(|v| v * v).sum::<f64>().sqrt(),
        _ => unreachable!("norm order restricted to 1 or 2 at construction"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_is_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn rows_view_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 2.0]);
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn norms() {
        let v = [3.0, -4.0];
        assert_eq!(norm_p(v.iter().copied(), 2), 5.0);
        assert_eq!(norm_p(v.iter().copied(), 1), 7.0);
        let w = [1.0, -2.0, 2.0];
        assert_eq!(norm_p(w.iter().copied(), 1), 5.0);
        assert_eq!(norm_p(w.iter().copied(), 2), 3.0);
    }
}
