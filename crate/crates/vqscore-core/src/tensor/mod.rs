//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Everything trainable in the engine is expressed through the primitives in
//! [`Tape`]: matmul, add/sub/mul (with limited broadcasting), axis means,
//! concat, slice, transpose, ReLU, sigmoid, softmax over the last axis, layer
//! normalization, and inverted dropout. Attention is composed from these
//! rather than fused, so every primitive stays finite-difference checkable.

mod check;
mod tape;

pub use check::gradient_check;
pub use tape::{Gradients, NodeId, Tape};

use std::fmt;
use std::iter::Sum;

use num_traits::Float;
use thiserror::Error;

/// Element type of the numeric core. Training and inference run at `f32`;
/// gradient checks run at `f64`.
pub trait Scalar:
    Float + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    // named to dodge ToPrimitive::to_f64, pulled in via Float's supertraits
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { op: &'static str, shape: Vec<usize> },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            msg: msg.into(),
        }
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    /// Marks the tensor as a differentiation leaf when bound to a [`Tape`].
    pub requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor from external input, rejecting NaN/Inf values and
    /// shape/data length disagreements.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::invalid(
                "tensor",
                format!(
                    "shape {:?} implies {} elements but data has {}",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// Internal constructor for values produced by tape ops; skips the
    /// finiteness scan.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::from_parts(shape, vec![F::zero(); numel])
    }

    pub fn scalar(v: F) -> Self {
        Tensor::from_parts(vec![1], vec![v])
    }

    pub fn vector(data: Vec<F>) -> Result<Self, TensorError> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// Builds a rank-2 tensor from equal-length rows.
    pub fn matrix(rows: &[Vec<F>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::invalid("tensor", "ragged rows"));
        }
        let data: Vec<F> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<F, TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                op: "item",
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        let mut t = Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        );
        t.requires_grad = self.requires_grad;
        t
    }

    /// Euclidean norm, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}
