use serde::{Deserialize, Serialize};

use super::NumericsError;
use crate::scalar::Scalar;

/// Shaped, row-major array with an attached gradient buffer.
///
/// Parameters and test inputs live here. During a forward pass the values are
/// copied onto a [`Tape`](super::Tape) as a leaf; after `backward` the
/// gradient with respect to that leaf is accumulated back into `grad`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffTensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Vec<T>,
    requires_grad: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> DiffTensor<T> {
    /// Builds a constant (non-differentiable) tensor.
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self, NumericsError> {
        if shape.contains(&0) {
            return Err(NumericsError::InvalidShape { shape });
        }
        if numel(&shape) != values.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "tensor",
                expected: vec![numel(&shape)],
                actual: vec![values.len()],
            });
        }
        Ok(Self {
            shape,
            values,
            grad: Vec::new(),
            requires_grad: false,
        })
    }

    /// Builds a tensor that participates in differentiation.
    pub fn param(shape: Vec<usize>, values: Vec<T>) -> Result<Self, NumericsError> {
        let mut t = Self::new(shape, values)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, NumericsError> {
        let n = numel(&shape);
        Self::new(shape, vec![T::zero(); n])
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> T) -> Result<Self, NumericsError> {
        let n = numel(&shape);
        Self::new(shape, (0..n).map(f).collect())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            grad: Vec::new(),
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        self.grad = if on {
            vec![T::zero(); self.values.len()]
        } else {
            Vec::new()
        };
    }

    /// Gradient buffer; empty when the tensor does not require gradients.
    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    /// Adds `delta` into the gradient buffer. No-op for constant tensors.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<(), NumericsError> {
        if !self.requires_grad {
            return Ok(());
        }
        if delta.len() != self.grad.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "accumulate_grad",
                expected: vec![self.grad.len()],
                actual: vec![delta.len()],
            });
        }
        for (g, d) in self.grad.iter_mut().zip(delta) {
            *g += *d;
        }
        Ok(())
    }
}
