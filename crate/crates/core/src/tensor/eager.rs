use super::graph::{self, Graph};
use super::{Reduction, Tensor};
use crate::error::Result;
use crate::rng::Rng;

/// Executes primitives immediately without recording anything. Used for
/// inference, where the tape's bookkeeping would be wasted.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Eager {
    pub(crate) fn softmax_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        graph::softmax_value(x, axis)
    }
}

impl Graph for Eager {
    type Node = Tensor;

    fn value<'a>(&'a self, node: &'a Tensor) -> &'a Tensor {
        node
    }

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
        graph::matmul_value(a, b, trans_a, trans_b)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(graph::add_value(a, b)?.0)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(graph::mul_value(a, b)?.0)
    }

    fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        graph::softmax_value(x, axis)
    }

    fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        Ok(graph::layer_norm_value(x, gain, bias)?.0)
    }

    fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        graph::gelu_value(x)
    }

    fn dropout(&mut self, x: &Tensor, rate: f64, rng: &mut Rng) -> Result<Tensor> {
        if rate == 0.0 {
            return Ok(x.clone());
        }
        let mask = graph::dropout_mask(x.numel(), rate, rng)?;
        let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(Tensor::from_parts(x.shape().to_vec(), out))
    }

    fn embedding(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        graph::embedding_value(table, ids)
    }

    fn cross_entropy(&mut self, logits: &Tensor, targets: &[usize], reduction: Reduction) -> Result<Tensor> {
        Ok(graph::cross_entropy_value(logits, targets, reduction)?.0)
    }

    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.len() == 1 {
            return Ok(parts[0].clone());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        graph::concat_rows_value(&refs)
    }

    fn slice_rows(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        if start == 0 && x.rank() == 2 && len == x.rows() {
            return Ok(x.clone());
        }
        x.slice_rows(start, len)
    }

    fn append_rows(&mut self, base: Option<Tensor>, extra: &Tensor) -> Result<Tensor> {
        match base {
            None => Ok(extra.clone()),
            Some(b) => b.append_rows(extra),
        }
    }
}
