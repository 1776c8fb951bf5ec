//! Dense row-major `f64` tensors and a reverse-mode tape.
//!
//! [`Tensor`] is a plain value: shape plus contiguous data, no graph
//! attached. Differentiable computation happens on a [`Tape`]: leaves are
//! inserted, ops append nodes, and [`Tape::backward`] runs one reverse
//! sweep. Files store `f32`; everything in memory is `f64` so
//! finite-difference checks have headroom.

mod gradcheck;
mod tape;

pub use gradcheck::{fd_gradient, max_rel_err};
pub use tape::{Grads, NodeId, Tape};

use crate::error::{DsaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, rejecting shape/length mismatch and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(DsaError::Shape {
                op: "tensor_new",
                detail: format!("shape {:?} implies {} values, got {}", shape, numel_of(&shape), data.len()),
            });
        }
        ensure_finite("tensor_new", &data)?;
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = numel_of(&shape);
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// In-place reshape; total element count must be preserved.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel_of(&shape) != self.data.len() {
            return Err(DsaError::Shape {
                op: "tensor_reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Errors unless every value is finite; `context` names the producer.
pub fn ensure_finite(context: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DsaError::NonFinite { context: context.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(DsaError::Shape { .. })
        ));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(DsaError::NonFinite { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::INFINITY]),
            Err(DsaError::NonFinite { .. })
        ));
    }

    #[test]
    fn f32_round_trip_quantizes() {
        let t = Tensor::new(vec![2], vec![0.1, 0.2]).unwrap();
        let q = Tensor::from_f32(vec![2], &t.to_f32()).unwrap();
        assert_eq!(q.data()[0], 0.1f32 as f64);
        assert_ne!(q.data()[0], 0.1f64);
    }
}
