use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::DiffTensor;
use super::NumericsError;
use crate::scalar::Scalar;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Optimizer parameter group. The pretrained-style encoder and the layers
/// added on top of it can be given different learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    Encoder,
    Added,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry<T> {
    name: String,
    group: ParamGroup,
    tensor: DiffTensor<T>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> DiffTensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    DiffTensor::param(shape, values).expect("init shape is positive")
}

/// Tape leaves for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn empty() -> Self {
        Self { vars: Vec::new() }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Same binding with parameter `id` read from `var` instead.
    pub fn replace(mut self, id: ParamId, var: Var) -> Self {
        self.vars[id.0] = var;
        self
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, mut tensor: DiffTensor<T>) -> ParamId {
        if !tensor.requires_grad() {
            tensor.set_requires_grad(true);
        }
        self.entries.push(Entry {
            name: name.into(),
            group,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn get(&self, id: ParamId) -> &DiffTensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffTensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.entries.iter().map(|e| tape.leaf(&e.tensor)).collect(),
        }
    }

    /// Records every parameter as a constant (inference without gradients).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| {
                    tape.constant(e.tensor.shape().to_vec(), e.tensor.values().to_vec())
                        .expect("store tensors are well-formed")
                })
                .collect(),
        }
    }

    /// Per-parameter gradients of one backward pass, in store order.
    pub fn collect_grads(&self, tape: &Tape<T>, bound: &Bound, grads: &Gradients<T>) -> Vec<Vec<T>> {
        bound.vars.iter().map(|&v| grads.get_or_zeros(tape, v)).collect()
    }

    /// Adds gradients into each tensor's `grad` buffer.
    pub fn accumulate(&mut self, grads: &[Vec<T>]) -> Result<(), NumericsError> {
        for (e, g) in self.entries.iter_mut().zip(grads) {
            e.tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    pub fn grad_norm(&self) -> T {
        self.entries
            .iter()
            .flat_map(|e| e.tensor.grad().iter())
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    /// Iterates `(name, group, tensor)` in store order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamGroup, &DiffTensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), e.group, &e.tensor))
    }
}
