//! Dense 64-bit tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable row-major array of `f64` plus an optional
//! handle into the [`Tape`] that produced it. Recording operations through a
//! tape builds a computation graph; [`Tape::backward`] walks it in reverse
//! and — crucially — records the walk itself, so gradients are ordinary
//! tensors that can be differentiated again. That closure under
//! differentiation is what powers the exact-trace and sliced objectives,
//! which need ∇_θ of quantities that already contain ∇_x.
//!
//! Supported ranks are 0 (scalar), 1 (vector) and 2 (matrix). Rank-2 tensors
//! double as batches: `[B, n]` holds B independent rows, and every network
//! operation treats rows independently.

pub(crate) mod kernels;
mod tape;

pub use tape::{Tape, PUBLIC_OP_KINDS};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Handle tying a tensor to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub idx: usize,
}

/// Immutable dense array of `f64` in row-major order.
///
/// Cloning is cheap (the buffer is shared). Tensors without a tape handle are
/// plain data and freely shareable across threads; tensors with a handle are
/// only meaningful together with their tape.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape("from_vec", &shape, data.len()));
        }
        Ok(Tensor {
            shape,
            data: data.into(),
            node: None,
        })
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v].into(),
            node: None,
        }
    }

    /// Rank-1 tensor from a slice.
    pub fn vector(v: &[f64]) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v.to_vec().into(),
            node: None,
        }
    }

    /// Rank-2 tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(vec![rows, cols], data)
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n].into(),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The value of a rank-0 tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::shape("scalar_value", "[]", &self.shape));
        }
        Ok(self.data[0])
    }

    /// Copy of this tensor with the tape handle removed: plain data.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Arc<[f64]>, node: NodeRef) -> Self {
        Tensor {
            shape,
            data,
            node: Some(node),
        }
    }

    pub(crate) fn data_arc(&self) -> Arc<[f64]> {
        self.data.clone()
    }
}
