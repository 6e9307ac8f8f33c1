//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] is an append-only list of nodes; every operation computes its
//! value eagerly (through the same kernels the plain forward passes use) and
//! records how to push gradients back to its parents. [`Tape::backward`]
//! then walks the list once in reverse.
//!
//! The op set is exactly what the toy captioner and the attack losses need;
//! this is not a general tensor library.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::numerics::{self, Matrix, NumericsError};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        requires_grad: bool,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    /// Row-broadcast add: `a (m×n) + bias (1×n)` on every row.
    AddRow {
        a: NodeId,
        bias: NodeId,
    },
    AddScalar {
        a: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    Silu {
        a: NodeId,
    },
    RowSoftmax {
        a: NodeId,
    },
    RowLayerNorm {
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    SliceRows {
        a: NodeId,
        start: usize,
    },
    MeanRows {
        a: NodeId,
    },
    /// Gather whole rows of `table` by index (embedding lookup).
    EmbedRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// Arbitrary data movement: `out.flat[t] = a.flat[idx[t]]`.
    Gather {
        a: NodeId,
        idx: Vec<usize>,
    },
    SumAll {
        a: NodeId,
    },
    Ln {
        a: NodeId,
    },
    XLogX {
        a: NodeId,
    },
    NuclearNorm {
        a: NodeId,
        subgradient: Matrix,
    },
    SumSquares {
        a: NodeId,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients of one backward pass, addressed by `NodeId`.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id).and_then(Option::as_ref)
    }
}

/// Append-only autodiff tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Whether any grad-requiring leaf is reachable below each node; the
    /// backward pass skips subgraphs that cannot need gradients.
    needs: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            needs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.data().len(), 1);
        self.nodes[id].value.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let needs = match &op {
            Op::Leaf { requires_grad } => *requires_grad,
            Op::MatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::AddRow { a, bias: b } => self.needs[*a] || self.needs[*b],
            Op::RowLayerNorm { a, gamma, beta } => {
                self.needs[*a] || self.needs[*gamma] || self.needs[*beta]
            }
            Op::ConcatRows { parts } | Op::ConcatCols { parts } => {
                parts.iter().any(|&p| self.needs[p])
            }
            Op::AddScalar { a }
            | Op::Scale { a, .. }
            | Op::Silu { a }
            | Op::RowSoftmax { a }
            | Op::SliceRows { a, .. }
            | Op::MeanRows { a }
            | Op::EmbedRows { table: a, .. }
            | Op::Gather { a, .. }
            | Op::SumAll { a }
            | Op::Ln { a }
            | Op::XLogX { a }
            | Op::NuclearNorm { a, .. }
            | Op::SumSquares { a } => self.needs[*a],
        };
        self.nodes.push(Node { value, op });
        self.needs.push(needs);
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf { requires_grad })
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_tt(a, b, false, false)
    }

    pub fn matmul_tt(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> NodeId {
        let value = self.nodes[a]
            .value
            .matmul(&self.nodes[b].value, trans_a, trans_b);
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.add(&self.nodes[b].value);
        self.push(value, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.sub(&self.nodes[b].value);
        self.push(value, Op::Sub { a, b })
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let b = &self.nodes[bias].value;
        debug_assert_eq!(b.rows(), 1);
        debug_assert_eq!(b.cols(), m.cols());
        let mut out = m.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow { a, bias })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let m = &self.nodes[a].value;
        let out = Matrix::from_vec_unchecked(
            m.rows(),
            m.cols(),
            m.data().iter().map(|v| v + c).collect(),
        );
        self.push(out, Op::AddScalar { a })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a].value.scale(c);
        self.push(value, Op::Scale { a, c })
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let out = Matrix::from_vec_unchecked(
            m.rows(),
            m.cols(),
            m.data().iter().map(|&x| silu_scalar(x)).collect(),
        );
        self.push(out, Op::Silu { a })
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let sm = numerics::softmax_slice(m.row(r));
            out.row_mut(r).copy_from_slice(&sm);
        }
        self.push(out, Op::RowSoftmax { a })
    }

    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let g = &self.nodes[gamma].value;
        let b = &self.nodes[beta].value;
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let normed = layer_norm_row(m.row(r), g.data(), b.data());
            out.row_mut(r).copy_from_slice(&normed);
        }
        self.push(out, Op::RowLayerNorm { a, gamma, beta })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.nodes[parts[0]].value.cols();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.rows()).sum();
        let mut data = Vec::with_capacity(total * cols);
        for &p in parts {
            debug_assert_eq!(self.nodes[p].value.cols(), cols);
            data.extend_from_slice(self.nodes[p].value.data());
        }
        self.push(
            Matrix::from_vec_unchecked(total, cols, data),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.nodes[parts[0]].value.rows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let part = &self.nodes[p].value;
            debug_assert_eq!(part.rows(), rows);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + part.cols()].copy_from_slice(part.row(r));
            }
            offset += part.cols();
        }
        self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let m = &self.nodes[a].value;
        let cols = m.cols();
        let data = m.data()[start * cols..(start + len) * cols].to_vec();
        self.push(
            Matrix::from_vec_unchecked(len, cols, data),
            Op::SliceRows { a, start },
        )
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let inv = 1.0 / m.rows() as f64;
        let mut out = Matrix::zeros(1, m.cols());
        for r in 0..m.rows() {
            for (o, &v) in out.row_mut(0).iter_mut().zip(m.row(r)) {
                *o += v;
            }
        }
        for o in out.data_mut() {
            *o *= inv;
        }
        self.push(out, Op::MeanRows { a })
    }

    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = &self.nodes[table].value;
        let cols = t.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            data.extend_from_slice(t.row(id));
        }
        self.push(
            Matrix::from_vec_unchecked(ids.len(), cols, data),
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Gather flat entries of `a` into a new `rows × cols` node.
    pub fn gather(&mut self, a: NodeId, idx: Vec<usize>, rows: usize, cols: usize) -> NodeId {
        debug_assert_eq!(idx.len(), rows * cols);
        let src = self.nodes[a].value.data();
        let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        self.push(
            Matrix::from_vec_unchecked(rows, cols, data),
            Op::Gather { a, idx },
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        self.push(Matrix::from_vec_unchecked(1, 1, vec![s]), Op::SumAll { a })
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let out = Matrix::from_vec_unchecked(
            m.rows(),
            m.cols(),
            m.data().iter().map(|&x| math::ln(x)).collect(),
        );
        self.push(out, Op::Ln { a })
    }

    pub fn xlogx(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let out = Matrix::from_vec_unchecked(
            m.rows(),
            m.cols(),
            m.data().iter().map(|&x| numerics::xlogx(x)).collect(),
        );
        self.push(out, Op::XLogX { a })
    }

    /// Nuclear norm node; the `U·Vᵀ` subgradient is cached at forward time.
    pub fn nuclear_norm(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let nn = numerics::nuclear_norm(&self.nodes[a].value)?;
        Ok(self.push(
            Matrix::from_vec_unchecked(1, 1, vec![nn.value]),
            Op::NuclearNorm {
                a,
                subgradient: nn.subgradient,
            },
        ))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data().iter().map(|v| v * v).sum();
        self.push(
            Matrix::from_vec_unchecked(1, 1, vec![s]),
            Op::SumSquares { a },
        )
    }

    /// `Σ w_i · term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut acc: Option<NodeId> = None;
        for &(node, w) in terms {
            let scaled = self.scale(node, w);
            acc = Some(match acc {
                None => scaled,
                Some(prev) => self.add(prev, scaled),
            });
        }
        acc.unwrap_or_else(|| self.constant(Matrix::zeros(1, 1)))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if self.needs[root] {
            grads[root] = Some(Matrix::from_vec_unchecked(1, 1, vec![1.0]));
        }
        for id in (0..=root).rev() {
            let grad = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(id, &grad, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, id: NodeId, grad: &Matrix, grads: &mut Vec<Option<Matrix>>) {
        let node = &self.nodes[id];
        let accumulate = |grads: &mut Vec<Option<Matrix>>, id: NodeId, delta: Matrix| {
            if self.needs[id] {
                accumulate_into(grads, id, delta);
            }
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if self.needs[*a] {
                    let da = match (trans_a, trans_b) {
                        (false, false) => grad.matmul(bv, false, true),
                        (false, true) => grad.matmul(bv, false, false),
                        (true, false) => bv.matmul(grad, false, true),
                        (true, true) => bv.matmul(grad, true, true),
                    };
                    accumulate(grads, *a, da);
                }
                if self.needs[*b] {
                    let db = match (trans_a, trans_b) {
                        (false, false) => av.matmul(grad, true, false),
                        (false, true) => grad.matmul(av, true, false),
                        (true, false) => av.matmul(grad, false, false),
                        (true, true) => grad.matmul(av, true, true),
                    };
                    accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, grad.clone());
                accumulate(grads, *b, grad.clone());
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, grad.clone());
                accumulate(grads, *b, grad.scale(-1.0));
            }
            Op::AddRow { a, bias } => {
                accumulate(grads, *a, grad.clone());
                let mut db = Matrix::zeros(1, grad.cols());
                for r in 0..grad.rows() {
                    for (o, &v) in db.row_mut(0).iter_mut().zip(grad.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *bias, db);
            }
            Op::AddScalar { a } => accumulate(grads, *a, grad.clone()),
            Op::Scale { a, c } => accumulate(grads, *a, grad.scale(*c)),
            Op::Silu { a } => {
                let x = &self.nodes[*a].value;
                let da = Matrix::from_vec_unchecked(
                    x.rows(),
                    x.cols(),
                    x.data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&x, &g)| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                );
                accumulate(grads, *a, da);
            }
            Op::RowSoftmax { a } => {
                let y = &node.value;
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = grad.row(r).iter().zip(y.row(r)).map(|(g, p)| g * p).sum();
                    for ((o, &g), &p) in da.row_mut(r).iter_mut().zip(grad.row(r)).zip(y.row(r)) {
                        *o = p * (g - dot);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::RowLayerNorm { a, gamma, beta } => {
                let x = &self.nodes[*a].value;
                let g = &self.nodes[*gamma].value;
                let n = x.cols() as f64;
                let mut da = Matrix::zeros(x.rows(), x.cols());
                let mut dgamma = Matrix::zeros(1, x.cols());
                let mut dbeta = Matrix::zeros(1, x.cols());
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv_std = 1.0 / math::sqrt(var + LN_EPS);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let gy: Vec<f64> = grad
                        .row(r)
                        .iter()
                        .zip(g.data())
                        .map(|(dy, gv)| dy * gv)
                        .collect();
                    let mean_gy = gy.iter().sum::<f64>() / n;
                    let mean_gy_xhat = gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..x.cols() {
                        da.row_mut(r)[c] = (gy[c] - mean_gy - xhat[c] * mean_gy_xhat) * inv_std;
                        dgamma.row_mut(0)[c] += grad.row(r)[c] * xhat[c];
                        dbeta.row_mut(0)[c] += grad.row(r)[c];
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.rows();
                    let cols = self.nodes[p].value.cols();
                    let block = Matrix::from_vec_unchecked(
                        rows,
                        cols,
                        grad.data()[start * cols..(start + rows) * cols].to_vec(),
                    );
                    accumulate(grads, p, block);
                    start += rows;
                }
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.rows();
                    let cols = self.nodes[p].value.cols();
                    let mut block = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        block
                            .row_mut(r)
                            .copy_from_slice(&grad.row(r)[offset..offset + cols]);
                    }
                    accumulate(grads, p, block);
                    offset += cols;
                }
            }
            Op::SliceRows { a, start } => {
                let src = &self.nodes[*a].value;
                let mut da = Matrix::zeros(src.rows(), src.cols());
                for r in 0..grad.rows() {
                    da.row_mut(start + r).copy_from_slice(grad.row(r));
                }
                accumulate(grads, *a, da);
            }
            Op::MeanRows { a } => {
                let src = &self.nodes[*a].value;
                let inv = 1.0 / src.rows() as f64;
                let mut da = Matrix::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    for (o, &g) in da.row_mut(r).iter_mut().zip(grad.row(0)) {
                        *o = g * inv;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::EmbedRows { table, ids } => {
                let t = &self.nodes[*table].value;
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &g) in dt.row_mut(id).iter_mut().zip(grad.row(r)) {
                        *o += g;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Gather { a, idx } => {
                let src = &self.nodes[*a].value;
                let mut da = Matrix::zeros(src.rows(), src.cols());
                for (t, &i) in idx.iter().enumerate() {
                    da.data_mut()[i] += grad.data()[t];
                }
                accumulate(grads, *a, da);
            }
            Op::SumAll { a } => {
                let src = &self.nodes[*a].value;
                let g = grad.data()[0];
                let da = Matrix::from_vec_unchecked(
                    src.rows(),
                    src.cols(),
                    vec![g; src.rows() * src.cols()],
                );
                accumulate(grads, *a, da);
            }
            Op::Ln { a } => {
                let x = &self.nodes[*a].value;
                let da = Matrix::from_vec_unchecked(
                    x.rows(),
                    x.cols(),
                    x.data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&x, &g)| g / x)
                        .collect(),
                );
                accumulate(grads, *a, da);
            }
            Op::XLogX { a } => {
                let x = &self.nodes[*a].value;
                let da = Matrix::from_vec_unchecked(
                    x.rows(),
                    x.cols(),
                    x.data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&x, &g)| if x > 0.0 { g * (math::ln(x) + 1.0) } else { 0.0 })
                        .collect(),
                );
                accumulate(grads, *a, da);
            }
            Op::NuclearNorm { a, subgradient } => {
                accumulate(grads, *a, subgradient.scale(grad.data()[0]));
            }
            Op::SumSquares { a } => {
                let x = &self.nodes[*a].value;
                accumulate(grads, *a, x.scale(2.0 * grad.data()[0]));
            }
        }
    }
}

fn accumulate_into(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + math::exp(-x))
}

/// Layer-norm kernel shared with the plain (non-tape) forward pass.
pub(crate) fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / math::sqrt(var + LN_EPS);
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| (v - mean) * inv_std * g + b)
        .collect()
}

/// Silu kernel shared with the plain forward pass.
#[inline]
pub(crate) fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Finite-difference check of d(scalar graph)/d(leaf) for an arbitrary
    /// graph builder.
    fn check_gradient<F>(leaf_value: &Matrix, build: F, tol: f64)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut tape = Tape::new();
        let leaf = tape.leaf(leaf_value.clone(), true);
        let root = build(&mut tape, leaf);
        let grads = tape.backward(root);
        let analytic = grads.get(leaf).expect("leaf gradient").clone();

        let flat = leaf_value.data().to_vec();
        let (rows, cols) = (leaf_value.rows(), leaf_value.cols());
        let fd = finite_diff_grad(
            |x| {
                let mut t = Tape::new();
                let l = t.leaf(Matrix::from_vec_unchecked(rows, cols, x.to_vec()), true);
                let r = build(&mut t, l);
                t.scalar(r)
            },
            &flat,
            1e-6,
        );
        for (i, (&a, &f)) in analytic.data().iter().zip(&fd).enumerate() {
            let scale = a.abs().max(f.abs()).max(1.0);
            assert!(
                (a - f).abs() <= tol * scale,
                "entry {i}: analytic {a} vs fd {f}"
            );
        }
    }

    #[test]
    fn matmul_chain_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 4, 2);
        check_gradient(
            &x,
            move |t, leaf| {
                let wn = t.constant(w.clone());
                let y = t.matmul(leaf, wn);
                t.sum_squares(y)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_transposed_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_mat(&mut rng, 3, 4);
        let k = rand_mat(&mut rng, 5, 4);
        // scores = Q·Kᵀ as used by attention.
        check_gradient(
            &q,
            move |t, leaf| {
                let kn = t.constant(k.clone());
                let s = t.matmul_tt(leaf, kn, false, true);
                t.sum_squares(s)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = rand_mat(&mut rng, 2, 6);
        check_gradient(
            &logits,
            |t, leaf| {
                let p = t.row_softmax(leaf);
                let x = t.xlogx(p);
                t.sum_all(x)
            },
            1e-5,
        );
    }

    #[test]
    fn layer_norm_gradient_wrt_input_and_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 3, 5);
        let gamma = rand_mat(&mut rng, 1, 5);
        let beta = rand_mat(&mut rng, 1, 5);
        let (g2, b2) = (gamma.clone(), beta.clone());
        check_gradient(
            &x,
            move |t, leaf| {
                let g = t.constant(g2.clone());
                let b = t.constant(b2.clone());
                let y = t.layer_norm(leaf, g, b);
                t.sum_squares(y)
            },
            1e-5,
        );
        let x2 = x.clone();
        check_gradient(
            &gamma,
            move |t, leaf| {
                let xn = t.constant(x2.clone());
                let b = t.constant(beta.clone());
                let y = t.layer_norm(xn, leaf, b);
                t.sum_squares(y)
            },
            1e-5,
        );
    }

    #[test]
    fn silu_slice_mean_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 4, 3);
        check_gradient(
            &x,
            |t, leaf| {
                let a = t.silu(leaf);
                let s = t.slice_rows(a, 1, 2);
                let m = t.mean_rows(s);
                t.sum_squares(m)
            },
            1e-5,
        );
    }

    #[test]
    fn embed_gather_ln_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Positive leaf so ln() stays finite.
        let x = Matrix::from_vec(2, 4, (0..8).map(|_| rng.gen_range(0.2..2.0)).collect()).unwrap();
        check_gradient(
            &x,
            |t, leaf| {
                let e = t.embed_rows(leaf, &[1, 0, 1]);
                let g = t.gather(e, vec![0, 5, 9], 3, 1);
                let l = t.ln(g);
                t.sum_all(l)
            },
            1e-5,
        );
    }

    #[test]
    fn concat_and_scale_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_mat(&mut rng, 2, 3);
        check_gradient(
            &x,
            |t, leaf| {
                let doubled = t.scale(leaf, 2.0);
                let cat = t.concat_rows(&[leaf, doubled]);
                let cols = t.concat_cols(&[cat, cat]);
                let shifted = t.add_scalar(cols, 0.5);
                t.sum_squares(shifted)
            },
            1e-5,
        );
    }

    #[test]
    fn nuclear_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_mat(&mut rng, 4, 3);
        check_gradient(
            &x,
            |t, leaf| {
                let n = t.nuclear_norm(leaf).unwrap();
                t.scale(n, -1.0)
            },
            1e-5,
        );
    }

    #[test]
    fn add_row_and_weighted_sum_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_mat(&mut rng, 3, 4);
        let bias = rand_mat(&mut rng, 1, 4);
        check_gradient(
            &x,
            move |t, leaf| {
                let b = t.constant(bias.clone());
                let y = t.add_row(leaf, b);
                let s1 = t.sum_squares(y);
                let s2 = t.sum_all(y);
                t.weighted_sum(&[(s1, 0.75), (s2, -1.25)])
            },
            1e-5,
        );
    }

    #[test]
    fn gradient_of_unreached_leaf_is_none() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::zeros(2, 2), true);
        let b = tape.leaf(Matrix::identity(2), true);
        let root = tape.sum_squares(b);
        let grads = tape.backward(root);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = sum((x + x)^2) = 4·sum(x²)  =>  dy/dx = 8x.
        let x = Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone(), true);
        let doubled = tape.add(leaf, leaf);
        let root = tape.sum_squares(doubled);
        let grads = tape.backward(root);
        let g = grads.get(leaf).unwrap();
        for (gv, xv) in g.data().iter().zip(x.data()) {
            assert!((gv - 8.0 * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn sub_and_sum_all_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_mat(&mut rng, 2, 2);
        let y = rand_mat(&mut rng, 2, 2);
        check_gradient(
            &x,
            move |t, leaf| {
                let yn = t.constant(y.clone());
                let d = t.sub(yn, leaf);
                let sq = t.sum_squares(d);
                let s = t.sum_all(d);
                t.weighted_sum(&[(sq, 1.0), (s, 2.0)])
            },
            1e-5,
        );
    }
}
