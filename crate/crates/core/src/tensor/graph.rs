use super::{Reduction, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Score assigned to masked attention entries. Finite so every op output stays
/// finite, and low enough that `exp` underflows to exactly zero.
pub const MASKED_SCORE: f64 = -1e30;

/// The primitive set shared by the recording [`Tape`](super::Tape) and the
/// non-recording [`Eager`](super::Eager) executor. Model code is written once
/// against this trait.
///
/// Math primitives: matmul, add, mul, softmax, layer norm, GELU, dropout,
/// embedding gather, cross-entropy. The row operations (`concat_rows`,
/// `slice_rows`, `append_rows`) only move data.
pub trait Graph {
    type Node: Clone;

    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Tensor;

    /// A value that takes no gradient.
    fn constant(&mut self, t: Tensor) -> Self::Node;

    /// 2-D matrix product with optional transposition of either operand.
    fn matmul(&mut self, a: &Self::Node, b: &Self::Node, trans_a: bool, trans_b: bool) -> Result<Self::Node>;

    /// Elementwise sum; `b` may also be a vector broadcast over rows of `a`.
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;

    /// Elementwise product; `b` may also be a scalar.
    fn mul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;

    fn softmax(&mut self, x: &Self::Node, axis: usize) -> Result<Self::Node>;

    /// Row-wise layer normalization with gain and bias vectors.
    fn layer_norm(&mut self, x: &Self::Node, gain: &Self::Node, bias: &Self::Node) -> Result<Self::Node>;

    fn gelu(&mut self, x: &Self::Node) -> Result<Self::Node>;

    /// Inverted dropout. A zero rate returns the input unchanged and draws
    /// nothing from `rng`.
    fn dropout(&mut self, x: &Self::Node, rate: f64, rng: &mut Rng) -> Result<Self::Node>;

    /// Gathers rows of `table`.
    fn embedding(&mut self, table: &Self::Node, ids: &[usize]) -> Result<Self::Node>;

    fn cross_entropy(&mut self, logits: &Self::Node, targets: &[usize], reduction: Reduction) -> Result<Self::Node>;

    fn concat_rows(&mut self, parts: &[Self::Node]) -> Result<Self::Node>;

    fn slice_rows(&mut self, x: &Self::Node, start: usize, len: usize) -> Result<Self::Node>;

    /// `base` with the rows of `extra` appended (`extra` alone when `base` is
    /// `None`).
    fn append_rows(&mut self, base: Option<Self::Node>, extra: &Self::Node) -> Result<Self::Node>;
}

/// Scaled dot-product attention composed from graph primitives.
///
/// Query `i` sits at absolute position `causal_from + i` and may attend to
/// keys `0..=causal_from + i`.
pub fn scaled_attention_in<G: Graph>(
    g: &mut G,
    q: &G::Node,
    k: &G::Node,
    v: &G::Node,
    causal_from: usize,
) -> Result<G::Node> {
    let ks = g.value(k).shape();
    let vs = g.value(v).shape();
    if ks.len() == 2 && vs.len() == 2 && ks[0] != vs[0] {
        return Err(Error::shape(
            "scaled_attention",
            format!("{} keys vs {} values", ks[0], vs[0]),
        ));
    }
    let weights = attention_weights_in(g, q, k, causal_from)?;
    g.matmul(&weights, v, false, false)
}

/// The masked, row-normalized attention weights `softmax(q kᵀ / sqrt(d_k))`.
pub fn attention_weights_in<G: Graph>(g: &mut G, q: &G::Node, k: &G::Node, causal_from: usize) -> Result<G::Node> {
    let (qs, ks) = (g.value(q).shape().to_vec(), g.value(k).shape().to_vec());
    if qs.len() != 2 || ks.len() != 2 {
        return Err(Error::shape("scaled_attention", "operands must be matrices"));
    }
    if qs[1] != ks[1] {
        return Err(Error::shape(
            "scaled_attention",
            format!("query width {} vs key width {}", qs[1], ks[1]),
        ));
    }
    let (nq, nk, dk) = (qs[0], ks[0], qs[1]);
    let scores = g.matmul(q, k, false, true)?;
    let scale = g.constant(Tensor::scalar(1.0 / (dk as f64).sqrt()));
    let mut scaled = g.mul(&scores, &scale)?;
    // Query 0 is the most restricted; nothing is masked if it sees every key.
    if nq > 0 && causal_from + 1 < nk {
        let mut mask = vec![0.0; nq * nk];
        for i in 0..nq {
            for j in (causal_from + i + 1).min(nk)..nk {
                mask[i * nk + j] = MASKED_SCORE;
            }
        }
        let mask = g.constant(Tensor::from_parts(vec![nq, nk], mask));
        scaled = g.add(&scaled, &mask)?;
    }
    g.softmax(&scaled, 1)
}

// ---------------------------------------------------------------------------
// Value computations shared by both executors.
// ---------------------------------------------------------------------------

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn as_matrix(op: &'static str, t: &Tensor, trans: bool) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(op, format!("expected matrix, got {:?}", t.shape())));
    }
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Ok(if trans { (c, r) } else { (r, c) })
}

pub(crate) fn matmul_value(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let (m, ka) = as_matrix("matmul", a, ta)?;
    let (kb, n) = as_matrix("matmul", b, tb)?;
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!(
                "{:?}{} x {:?}{}",
                a.shape(),
                if ta { "ᵀ" } else { "" },
                b.shape(),
                if tb { "ᵀ" } else { "" }
            ),
        ));
    }
    let a_rows;
    let a_data: &[f64] = if ta {
        a_rows = super::kernels::transpose(a.data(), ka, m);
        &a_rows
    } else {
        a.data()
    };
    let mut out = vec![0.0; m * n];
    if tb {
        super::kernels::gemm_nt(a_data, b.data(), m, n, ka, &mut out);
    } else {
        super::kernels::gemm_nn(a_data, b.data(), m, ka, n, &mut out);
    }
    Tensor::checked("matmul", vec![m, n], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    Rows,
    Scalar,
}

pub(crate) fn add_value(a: &Tensor, b: &Tensor) -> Result<(Tensor, Broadcast)> {
    if a.shape() == b.shape() {
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        return Ok((Tensor::checked("add", a.shape().to_vec(), out)?, Broadcast::Same));
    }
    if b.rank() == 1 && a.rank() >= 1 && b.numel() == a.cols() {
        let c = a.cols();
        let mut out = a.to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, y) in row.iter_mut().zip(b.data()) {
                *o += y;
            }
        }
        return Ok((Tensor::checked("add", a.shape().to_vec(), out)?, Broadcast::Rows));
    }
    Err(Error::shape("add", format!("{:?} + {:?}", a.shape(), b.shape())))
}

pub(crate) fn mul_value(a: &Tensor, b: &Tensor) -> Result<(Tensor, Broadcast)> {
    if a.shape() == b.shape() {
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        return Ok((Tensor::checked("mul", a.shape().to_vec(), out)?, Broadcast::Same));
    }
    if b.numel() == 1 && b.rank() <= 1 {
        let s = b.item();
        let out = a.data().iter().map(|x| x * s).collect();
        return Ok((Tensor::checked("mul", a.shape().to_vec(), out)?, Broadcast::Scalar));
    }
    Err(Error::shape("mul", format!("{:?} * {:?}", a.shape(), b.shape())))
}

/// (outer, axis length, inner) strides for a reduction along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape("softmax", format!("axis {axis} for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax_value(x: &Tensor, axis: usize) -> Result<Tensor> {
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(src[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (src[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
    Tensor::checked("softmax", x.shape().to_vec(), out)
}

/// Returns the normalized output plus per-row `(mean, inverse std)`.
pub(crate) fn layer_norm_value(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, Vec<(f64, f64)>)> {
    let c = x.cols();
    if gain.numel() != c || bias.numel() != c {
        return Err(Error::shape(
            "layer_norm",
            format!("width {c}, gain {:?}, bias {:?}", gain.shape(), bias.shape()),
        ));
    }
    let mut out = vec![0.0; x.numel()];
    let mut stats = Vec::with_capacity(x.rows());
    for (row, dst) in x.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for (((d, &v), &g), &b) in dst.iter_mut().zip(row).zip(gain.data()).zip(bias.data()) {
            *d = (v - mean) * rstd * g + b;
        }
        stats.push((mean, rstd));
    }
    Ok((Tensor::checked("layer_norm", x.shape().to_vec(), out)?, stats))
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn gelu_value(x: &Tensor) -> Result<Tensor> {
    Tensor::checked(
        "gelu",
        x.shape().to_vec(),
        x.data().iter().map(|&v| gelu_scalar(v)).collect(),
    )
}

/// Per-element keep scale: 0 for dropped elements, `1 / (1 - rate)` otherwise.
pub(crate) fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    use rand::Rng as _;
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

pub(crate) fn embedding_value(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    if table.rank() != 2 {
        return Err(Error::shape("embedding", format!("table {:?}", table.shape())));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::OutOfRange {
                what: "embedding",
                index: id,
                limit: v,
            });
        }
        out.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_parts(vec![ids.len(), d], out))
}

/// Returns the reduced loss and the row-wise softmax used by the backward pass.
pub(crate) fn cross_entropy_value(
    logits: &Tensor,
    targets: &[usize],
    reduction: Reduction,
) -> Result<(Tensor, Tensor)> {
    if logits.rank() != 2 || logits.rows() != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} for {} targets", logits.shape(), targets.len()),
        ));
    }
    let v = logits.cols();
    let probs = softmax_value(logits, 1)?;
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::OutOfRange {
                what: "cross_entropy target",
                index: t,
                limit: v,
            });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    let loss = match reduction {
        Reduction::Sum => total,
        Reduction::Mean if targets.is_empty() => 0.0,
        Reduction::Mean => total / targets.len() as f64,
    };
    Ok((Tensor::checked("cross_entropy", vec![], vec![loss])?, probs))
}

pub(crate) fn concat_rows_value(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no parts"))?;
    let c = first.cols();
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        if p.rank() != 2 || p.cols() != c {
            return Err(Error::shape("concat_rows", format!("{:?} with width {c}", p.shape())));
        }
        rows += p.rows();
        out.extend_from_slice(p.data());
    }
    Ok(Tensor::from_parts(vec![rows, c], out))
}
