//! Dense f64 tensors and a define-by-run reverse-mode tape.
//!
//! Weight matrices live in [`Tensor`]s owned by the model. Each training step
//! builds a fresh [`Tape`] that borrows those tensors as leaves, records the
//! forward computation, and replays it backwards into a [`Gradients`] store.

mod kernels;
mod tape;

pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {reason} (shape {shape:?})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("softmax row {row} has every entry masked")]
    DegenerateRow { row: usize },
    #[error("{op}: index {index} out of range for size {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{0} was recorded on a different tape")]
    ForeignVar(Var),
}

/// A dense row-major array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::BadShape {
                op: "tensor",
                shape,
                reason: "dimensions must be positive",
            });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::DimensionMismatch {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Values and gradient, borrowed together for in-place updates.
    pub fn data_and_grad_mut(&mut self) -> (&mut [f64], Option<&[f64]>) {
        (&mut self.data, self.grad.as_deref())
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning gradients off also drops any existing gradient buffer.
    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    /// Adds `g` into the gradient buffer. A tensor that does not require
    /// gradients ignores the call and never allocates a buffer.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<(), TensorError> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.data.len() {
            return Err(TensorError::DataLength {
                shape: self.shape.clone(),
                len: g.len(),
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Element `(i, j)` of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }
}
