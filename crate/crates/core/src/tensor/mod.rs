//! Dense `f64` tensors with a define-by-run reverse-mode tape.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computations are
//! recorded on a [`Graph`] through [`Var`] handles; [`Graph::backward`]
//! replays the tape in reverse id order.

pub mod gradcheck;
mod graph;
mod optim;

pub use graph::{Gradients, Graph, OpKind, Var};
pub(crate) use graph::softplus;
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    DomainError { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("no gradient supplied for parameter `{0}`")]
    MissingGradient(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor. A scalar has an empty shape and one element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// One-dimensional tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, 0.0)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Gathers rows of a rank-2 tensor into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let cols = self.shape[1];
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Result shape of broadcasting `a` against `b`: shapes are aligned on the
/// trailing axis and a dimension may only expand from size 1 (or be absent).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// Maps flat output indices onto flat input indices under broadcasting.
#[derive(Debug, Clone)]
pub(crate) enum BroadcastIndex {
    Same,
    Scalar,
    /// Input equals a trailing block of the output; index is `i % n`.
    Cyclic(usize),
    Map(Vec<usize>),
}

impl BroadcastIndex {
    pub(crate) fn new(out: &[usize], input: &[usize]) -> Self {
        let n_in = numel(input);
        if out == input {
            return Self::Same;
        }
        if n_in == 1 {
            return Self::Scalar;
        }
        let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if out.len() >= trimmed.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return Self::Cyclic(n_in);
        }
        // general case: zero strides on expanded axes
        let rank = out.len();
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for k in 0..input.len() {
            let axis_in = input.len() - 1 - k;
            let axis_out = rank - 1 - k;
            if input[axis_in] != 1 {
                strides[axis_out] = acc;
            }
            acc *= input[axis_in];
        }
        let total = numel(out);
        let mut map = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..total {
            map.push(offset);
            for axis in (0..rank).rev() {
                counter[axis] += 1;
                offset += strides[axis];
                if counter[axis] < out[axis] {
                    break;
                }
                offset -= strides[axis] * counter[axis];
                counter[axis] = 0;
            }
        }
        Self::Map(map)
    }

    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Self::Same => i,
            Self::Scalar => 0,
            Self::Cyclic(n) => i % n,
            Self::Map(m) => m[i],
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1], &[1, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[], &[4, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn general_broadcast_map() {
        let idx = BroadcastIndex::new(&[2, 3], &[2, 1]);
        let got: Vec<usize> = (0..6).map(|i| idx.at(i)).collect();
        assert_eq!(got, vec![0, 0, 0, 1, 1, 1]);
        let idx = BroadcastIndex::new(&[2, 2, 3], &[2, 1, 3]);
        let got: Vec<usize> = (0..12).map(|i| idx.at(i)).collect();
        assert_eq!(got, vec![0, 1, 2, 0, 1, 2, 3, 4, 5, 3, 4, 5]);
    }

    #[test]
    fn length_checked() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert_eq!(Tensor::scalar(3.0).item(), Some(3.0));
    }
}
