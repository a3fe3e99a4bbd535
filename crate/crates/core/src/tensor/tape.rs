//! Reverse-mode differentiation over whole-tensor primitives.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.

use super::graph::{self, Broadcast, Graph};
use super::{Reduction, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Constant,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    Gelu {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
        reduction: Reduction,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner recording of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Borrowed gradient data, `None` when it is identically zero.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Backpropagates from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.val(output).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.val(output).shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.val(v).numel()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::MatMul { a, b, ta, tb } => {
                let gc = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                if self.rg(a) {
                    let da = if ta {
                        graph::matmul_value(self.val(b), &gc, tb, true)?
                    } else {
                        graph::matmul_value(&gc, self.val(b), false, !tb)?
                    };
                    self.accumulate(grads, a, da.data());
                }
                if self.rg(b) {
                    let db = if tb {
                        graph::matmul_value(&gc, self.val(a), true, ta)?
                    } else {
                        graph::matmul_value(self.val(a), &gc, !ta, false)?
                    };
                    self.accumulate(grads, b, db.data());
                }
            }
            &Op::Add { a, b, bc } => {
                self.accumulate(grads, a, g);
                match bc {
                    Broadcast::Same => self.accumulate(grads, b, g),
                    Broadcast::Rows => {
                        let c = self.val(b).numel();
                        self.accumulate_with(grads, b, |acc| {
                            for row in g.chunks_exact(c) {
                                for (s, x) in acc.iter_mut().zip(row) {
                                    *s += x;
                                }
                            }
                        });
                    }
                    Broadcast::Scalar => unreachable!("add never broadcasts scalars"),
                }
            }
            &Op::Mul { a, b, bc } => {
                let (av, bv) = (self.val(a).data(), self.val(b).data());
                match bc {
                    Broadcast::Same => {
                        self.accumulate_with(grads, a, |acc| {
                            for ((s, x), y) in acc.iter_mut().zip(g).zip(bv) {
                                *s += x * y;
                            }
                        });
                        self.accumulate_with(grads, b, |acc| {
                            for ((s, x), y) in acc.iter_mut().zip(g).zip(av) {
                                *s += x * y;
                            }
                        });
                    }
                    Broadcast::Scalar => {
                        let s = bv[0];
                        self.accumulate_with(grads, a, |acc| {
                            for (d, x) in acc.iter_mut().zip(g) {
                                *d += x * s;
                            }
                        });
                        self.accumulate_with(grads, b, |acc| {
                            acc[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
                        });
                    }
                    Broadcast::Rows => unreachable!("mul never broadcasts rows"),
                }
            }
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = graph::axis_split(node.value.shape(), axis)?;
                self.accumulate_with(grads, x, |acc| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dotp = 0.0;
                            for j in 0..len {
                                dotp += g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..len {
                                let k = base + j * inner;
                                acc[k] += y[k] * (g[k] - dotp);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let xv = self.val(*x).data();
                let gv = self.val(*gain).data();
                let c = gv.len();
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let row = &xv[r * c..(r + 1) * c];
                    let grow = &g[r * c..(r + 1) * c];
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = grow[j] * gv[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gain, &dgain);
                self.accumulate(grads, *bias, &dbias);
            }
            &Op::Gelu { x } => {
                let xv = self.val(x).data();
                self.accumulate_with(grads, x, |acc| {
                    for ((s, d), &v) in acc.iter_mut().zip(g).zip(xv) {
                        *s += d * graph::gelu_grad_scalar(v);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate_with(grads, *x, |acc| {
                    for ((s, d), m) in acc.iter_mut().zip(g).zip(mask) {
                        *s += d * m;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.val(*table).cols();
                self.accumulate_with(grads, *table, |acc| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (s, x) in acc[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *s += x;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                reduction,
            } => {
                let scale = match reduction {
                    Reduction::Sum => g[0],
                    Reduction::Mean if targets.is_empty() => 0.0,
                    Reduction::Mean => g[0] / targets.len() as f64,
                };
                let v = probs.cols();
                let p = probs.data();
                self.accumulate_with(grads, *logits, |acc| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            acc[r * v + j] += (p[r * v + j] - onehot) * scale;
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).numel();
                    self.accumulate(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            &Op::SliceRows { x, start } => {
                let c = self.val(x).cols();
                self.accumulate_with(grads, x, |acc| {
                    for (s, d) in acc[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *s += d;
                    }
                });
            }
        }
        Ok(())
    }
}

impl Graph for Tape {
    type Node = Var;

    fn value<'a>(&'a self, node: &'a Var) -> &'a Tensor {
        &self.nodes[node.0].value
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    fn matmul(&mut self, a: &Var, b: &Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let out = graph::matmul_value(self.val(*a), self.val(*b), trans_a, trans_b)?;
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(
            out,
            Op::MatMul {
                a: *a,
                b: *b,
                ta: trans_a,
                tb: trans_b,
            },
            rg,
        ))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (out, bc) = graph::add_value(self.val(*a), self.val(*b))?;
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(out, Op::Add { a: *a, b: *b, bc }, rg))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (out, bc) = graph::mul_value(self.val(*a), self.val(*b))?;
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(out, Op::Mul { a: *a, b: *b, bc }, rg))
    }

    fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        let out = graph::softmax_value(self.val(*x), axis)?;
        let rg = self.rg(*x);
        Ok(self.push(out, Op::Softmax { x: *x, axis }, rg))
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        let (out, stats) = graph::layer_norm_value(self.val(*x), self.val(*gain), self.val(*bias))?;
        let rg = self.rg(*x) || self.rg(*gain) || self.rg(*bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: *x,
                gain: *gain,
                bias: *bias,
                stats,
            },
            rg,
        ))
    }

    fn gelu(&mut self, x: &Var) -> Result<Var> {
        let out = graph::gelu_value(self.val(*x))?;
        let rg = self.rg(*x);
        Ok(self.push(out, Op::Gelu { x: *x }, rg))
    }

    fn dropout(&mut self, x: &Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if rate == 0.0 {
            return Ok(*x);
        }
        let xv = self.val(*x);
        let mask = graph::dropout_mask(xv.numel(), rate, rng)?;
        let out = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(*x);
        Ok(self.push(out, Op::Dropout { x: *x, mask }, rg))
    }

    fn embedding(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        let out = graph::embedding_value(self.val(*table), ids)?;
        let rg = self.rg(*table);
        Ok(self.push(
            out,
            Op::Embedding {
                table: *table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    fn cross_entropy(&mut self, logits: &Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
        let (loss, probs) = graph::cross_entropy_value(self.val(*logits), targets, reduction)?;
        let rg = self.rg(*logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits: *logits,
                targets: targets.to_vec(),
                probs,
                reduction,
            },
            rg,
        ))
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
        let out = graph::concat_rows_value(&values)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    fn slice_rows(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.val(*x);
        if start == 0 && xv.rank() == 2 && len == xv.rows() {
            return Ok(*x);
        }
        let out = xv.slice_rows(start, len)?;
        let rg = self.rg(*x);
        Ok(self.push(out, Op::SliceRows { x: *x, start }, rg))
    }

    fn append_rows(&mut self, base: Option<Var>, extra: &Var) -> Result<Var> {
        match base {
            None => Ok(*extra),
            Some(b) => self.concat_rows(&[b, *extra]),
        }
    }
}

/// Evaluates a scalar function of `inputs` on a fresh tape and returns its
/// value together with the gradient for each input.
pub fn gradient_of<F>(inputs: &[Tensor], f: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok((tape.val(out).item(), vars.iter().map(|&v| grads.get(v)).collect()))
}
