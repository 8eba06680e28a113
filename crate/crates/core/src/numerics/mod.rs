//! Minimal reverse-mode differentiation over shaped arrays.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters live in a
//! [`ParamStore`] and are copied onto the tape as leaves; after
//! [`Tape::backward`] their gradients are accumulated back into the store.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
pub use params::{init_uniform, Bound, ParamGroup, ParamId, ParamStore};
pub use tape::{BinaryKind, Gradients, Primitive, Tape, UnaryKind, Var};
pub use tensor::DiffTensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {actual:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        actual: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: reduction over empty axis {axis}")]
    EmptyAxis { op: &'static str, axis: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("slice [{start}, {end}) out of range for length {len}")]
    SliceOutOfRange { start: usize, end: usize, len: usize },
    #[error("{op}: dimension {dim} not divisible into {groups} groups")]
    Indivisible {
        op: &'static str,
        dim: usize,
        groups: usize,
    },
    #[error("{op}: expected {expected} inputs, got {actual}")]
    Arity {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("tensor shapes must be positive, got {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("backward requires a single-element loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("function value is not finite at coordinate {coordinate} (step {step:+e})")]
    NonFinite { coordinate: usize, step: f64 },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("finite difference step must be positive, got {0}")]
    InvalidStep(f64),
}
