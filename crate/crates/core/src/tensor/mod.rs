//! Dense tensors, a reverse-mode tape, and the eager executor that shares the
//! same primitive set.

pub mod checkpoint;
mod eager;
mod graph;
pub mod kernels;
mod tape;

pub use eager::Eager;
pub use graph::{attention_weights_in, scaled_attention_in, Graph, MASKED_SCORE};
pub use tape::{gradient_of, Gradients, Tape, Var};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Row-major f64 tensor. Immutable once built; clones share storage.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {want} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for kernel outputs whose length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    /// Like [`Tensor::from_parts`] but checks finiteness, naming the op.
    pub(crate) fn checked(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![], vec![value])
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Tensor::new(vec![values.len()], values.to_vec())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Tensor::from_rows", "ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Trailing dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        self.numel().checked_div(self.cols()).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("t", format!("rank {} tensor", self.rank())));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Tensor::from_parts(vec![c, r], kernels::transpose(&self.data, r, c)))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Tensor::checked("map", self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Returns a tensor with `extra` rows appended. Storage is reused in place
    /// when this is the only handle to it.
    pub(crate) fn append_rows(mut self, extra: &Tensor) -> Result<Self> {
        if self.rank() != 2 || extra.rank() != 2 || self.shape[1] != extra.shape[1] {
            return Err(Error::shape(
                "append_rows",
                format!("{:?} + {:?}", self.shape, extra.shape),
            ));
        }
        Arc::make_mut(&mut self.data).extend_from_slice(&extra.data);
        self.shape[0] += extra.shape[0];
        Ok(self)
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if self.rank() != 2 || start + len > self.shape[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("{:?}[{start}..{}]", self.shape, start + len),
            ));
        }
        let c = self.shape[1];
        Ok(Tensor::from_parts(
            vec![len, c],
            self.data[start * c..(start + len) * c].to_vec(),
        ))
    }

    /// Rounds every value through f32, the checkpoint storage precision.
    pub fn to_f32_precision(&self) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| v as f32 as f64).collect())
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    Eager.softmax_axis(x, axis)
}

/// `softmax(q kᵀ / sqrt(d_k)) v` with a causal mask: query `i` sits at
/// absolute position `causal_from + i` and sees keys `0..=causal_from + i`.
pub fn scaled_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal_from: usize) -> Result<Tensor> {
    scaled_attention_in(&mut Eager, q, k, v, causal_from)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let loss = Eager.cross_entropy(logits, targets, Reduction::Mean)?;
    Ok(loss.item())
}

/// How a per-row loss is reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}
