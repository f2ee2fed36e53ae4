//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable value types backed by shared buffers. Recording
//! happens through a [`Tape`]: operations invoked on a tape produce outputs
//! that remember their provenance, and [`Tape::backward`] replays the tape in
//! reverse to accumulate gradients for every watched leaf.
//!
//! A tape and the tensors recorded on it belong to one logical pass (one
//! sample); distinct tapes are independent and may run on separate threads.

mod check;
mod ops;
mod tape;

pub use check::finite_diff_check;
pub use tape::{Gradients, NodeId, Tape};

use std::fmt;
use std::sync::Arc;

/// Errors surfaced by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operation produced a NaN or infinity.
    NonFinite { op: &'static str },
    /// A scalar (single-element) tensor was required.
    NotScalar { shape: Vec<usize> },
    /// Axis index exceeds the tensor rank or addresses an empty extent.
    InvalidAxis { op: &'static str, axis: usize },
    /// Invalid argument for the named operation.
    InvalidArg { op: &'static str, msg: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            TensorError::NonFinite { op } => write!(f, "{op}: non-finite result"),
            TensorError::NotScalar { shape } => {
                write!(f, "expected scalar tensor, got shape {shape:?}")
            }
            TensorError::InvalidAxis { op, axis } => write!(f, "{op}: invalid axis {axis}"),
            TensorError::InvalidArg { op, msg } => write!(f, "{op}: {msg}"),
        }
    }
}

impl std::error::Error for TensorError {}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor.
///
/// Cloning is cheap (the buffer is shared). `node` ties the tensor to the
/// tape that produced it; plain tensors (constants, inputs) carry no node and
/// never receive gradients.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a flat row-major buffer. Rejects shape/length
    /// disagreements and non-finite values.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(TensorError::InvalidArg {
                op: "from_vec",
                msg: format!("shape {shape:?} does not describe {} elements", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Self::raw(shape, data))
    }

    /// Widens an f32 buffer (the on-disk representation) into a tensor.
    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| v as f64).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self::raw(shape, vec![0.0; numel])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::raw(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(vec![1, 1], vec![value])
    }

    /// Column vector (n×1) from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self::raw(vec![values.len(), 1], values.to_vec())
    }

    /// Row vector (1×n) from a slice.
    pub fn row(values: &[f64]) -> Self {
        Self::raw(vec![1, values.len()], values.to_vec())
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        }
    }

    pub(crate) fn with_node(mut self, node: NodeId, requires_grad: bool) -> Self {
        self.node = Some(node);
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count for rank-2 tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count for rank-2 tensors.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Extracts the single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Narrows to the f32 wire representation.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Returns a copy with one element replaced (used by finite differencing).
    pub fn with_element(&self, index: usize, value: f64) -> Self {
        let mut data = self.data.as_ref().clone();
        data[index] = value;
        Self::raw(self.shape.clone(), data)
    }

    /// Detached copy: same values, no tape linkage.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            requires_grad: false,
        }
    }
}

pub(crate) fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_shape_mismatch() {
        let err = Tensor::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::InvalidArg { .. }));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "from_vec" });
    }

    #[test]
    fn scalar_item_round_trip() {
        assert_eq!(Tensor::scalar(3.5).item().unwrap(), 3.5);
        assert!(Tensor::zeros(vec![2, 2]).item().is_err());
    }

    #[test]
    fn f32_widen_narrow_is_bit_exact() {
        let original: Vec<f32> = vec![0.1, -2.5, 3.0e-8, 1.0e20];
        let t = Tensor::from_f32(vec![4, 1], &original).unwrap();
        let back = t.to_f32_vec();
        for (a, b) in original.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
