use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::optim::{Param, ParamGroup};
use super::{mm, mm_nt, mm_tn, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Set of parameter groups that receive gradients on a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const NONE: GroupSet = GroupSet(0);
    pub const ALL: GroupSet = GroupSet(0b1111);

    pub fn of(groups: &[ParamGroup]) -> Self {
        GroupSet(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, group: ParamGroup) -> bool {
        self.0 & group.bit() != 0
    }

    pub fn with(self, group: ParamGroup) -> Self {
        GroupSet(self.0 | group.bit())
    }
}

/// Constant sparse matrix in CSR form, used for neighbourhood aggregation.
#[derive(Clone, Debug)]
pub struct SparseRows {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseRows {
    /// Entries are `(row, col, weight)`; order within a row is preserved.
    pub fn from_entries(rows: usize, cols: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let mut counts = vec![0usize; rows + 1];
        for &(r, c, _) in entries {
            if r >= rows {
                return Err(Error::Index {
                    op: "SparseRows",
                    index: r,
                    bound: rows,
                });
            }
            if c >= cols {
                return Err(Error::Index {
                    op: "SparseRows",
                    index: c,
                    bound: cols,
                });
            }
            counts[r + 1] += 1;
        }
        for i in 0..rows {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut fill = counts;
        let mut indices = vec![0; entries.len()];
        let mut weights = vec![0.0; entries.len()];
        for &(r, c, w) in entries {
            let at = fill[r];
            indices[at] = c;
            weights[at] = w;
            fill[r] += 1;
        }
        Ok(SparseRows {
            rows,
            cols,
            offsets,
            indices,
            weights,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    fn apply(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * n];
        for r in 0..self.rows {
            let orow = &mut out[r * n..(r + 1) * n];
            for e in self.offsets[r]..self.offsets[r + 1] {
                let w = self.weights[e];
                let xrow = &x[self.indices[e] * n..(self.indices[e] + 1) * n];
                for (o, &v) in orow.iter_mut().zip(xrow) {
                    *o += w * v;
                }
            }
        }
        out
    }

    fn apply_transposed(&self, g: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cols * n];
        for r in 0..self.rows {
            let grow = &g[r * n..(r + 1) * n];
            for e in self.offsets[r]..self.offsets[r + 1] {
                let w = self.weights[e];
                let c = self.indices[e];
                let orow = &mut out[c * n..(c + 1) * n];
                for (o, &v) in orow.iter_mut().zip(grow) {
                    *o += w * v;
                }
            }
        }
        out
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MaskedSoftmax(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SpMM {
        a: Rc<SparseRows>,
        x: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run recording of differentiable operations.
///
/// A tape created with [`Tape::no_grad`] records values only; nothing on it
/// requires a gradient and `backward` yields no parameter gradients.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
    trainable: GroupSet,
    bound: RefCell<Vec<(String, Var)>>,
    bound_index: RefCell<HashMap<String, Var>>,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// Tape on which every parameter group is trainable.
    pub fn new() -> Self {
        Tape::with_groups(GroupSet::ALL)
    }

    pub fn with_groups(trainable: GroupSet) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            trainable,
            bound: RefCell::new(Vec::new()),
            bound_index: RefCell::new(HashMap::new()),
        }
    }

    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::with_groups(GroupSet::NONE)
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that requires a gradient whenever the tape records gradients.
    pub fn variable(&self, t: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(t, Op::Leaf, rg)
    }

    /// Binds a parameter as a leaf. Binding the same name twice returns the
    /// same handle, so gradients from every use accumulate in one place.
    pub fn param(&self, p: &Param) -> Var {
        if let Some(&v) = self.bound_index.borrow().get(p.name()) {
            return v;
        }
        let rg = self.grad_enabled && self.trainable.contains(p.group());
        let v = self.push(p.value().clone(), Op::Leaf, rg);
        self.bound.borrow_mut().push((p.name().to_string(), v));
        self.bound_index
            .borrow_mut()
            .insert(p.name().to_string(), v);
        v
    }

    /// Gradients of every bound, trainable parameter, in binding order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(String, Tensor)> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        self.grad_enabled && vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape() != y.shape() {
                return Err(Error::shape("add", x.shape(), y.shape()));
            }
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a vector of length `cols` to every row.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, b) = (&nodes[a.0].value, &nodes[bias.0].value);
            if b.rank() != 1 || x.cols() != b.numel() {
                return Err(Error::shape("add_bias", x.shape(), b.shape()));
            }
            let n = b.numel();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape() != y.shape() {
                return Err(Error::shape("mul", x.shape(), y.shape()));
            }
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| c * x);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let out = self.map(a, |x| gelu(x).0);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn softplus(&self, a: Var) -> Var {
        let out = self.map(a, softplus);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Softplus(a), rg)
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let s = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            t.data().iter().sum::<f64>() / t.numel() as f64
        };
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums the last dimension of a matrix, `[m, n] -> [m]`.
    pub fn row_sum(&self, a: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.rank() != 2 {
                return Err(Error::shape("row_sum", t.shape(), &[]));
            }
            let n = t.cols();
            Tensor::vector(t.data().chunks(n.max(1)).map(|r| r.iter().sum()).collect())
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::RowSum(a), rg))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes.borrow()[a.0].value.clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Per-row normalisation to zero mean and unit variance followed by the
    /// affine map `gain * xhat + bias`.
    pub fn layer_norm(&self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (x, g, b) = (
                &nodes[a.0].value,
                &nodes[gain.0].value,
                &nodes[bias.0].value,
            );
            let n = x.cols();
            if x.rank() != 2 || n == 0 || g.shape() != [n] || b.shape() != [n] {
                return Err(Error::shape("layer_norm", x.shape(), g.shape()));
            }
            let mut out = vec![0.0; x.numel()];
            let mut xhat = vec![0.0; x.numel()];
            let mut inv_std = Vec::with_capacity(x.rows());
            for (i, row) in x.data().chunks(n).enumerate() {
                let mu = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std.push(inv);
                for j in 0..n {
                    let h = (row[j] - mu) * inv;
                    xhat[i * n + j] = h;
                    out[i * n + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std)
        };
        let rg = self.any_grad(&[a, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[logits.0].value;
            if x.rank() != 2 || x.rows() != labels.len() || labels.is_empty() {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    x.shape(),
                    &[labels.len()],
                ));
            }
            let c = x.cols();
            let mut probs = vec![0.0; x.numel()];
            let mut total = 0.0;
            for (i, row) in x.data().chunks(c).enumerate() {
                let label = labels[i];
                if label >= c {
                    return Err(Error::Index {
                        op: "softmax_cross_entropy",
                        index: label,
                        bound: c,
                    });
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let lse = max + z.ln();
                total += lse - row[label];
                for j in 0..c {
                    probs[i * c + j] = (row[j] - lse).exp();
                }
            }
            (total / labels.len() as f64, probs)
        };
        let rg = self.any_grad(&[logits]);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Softmax over the last dimension of `[batch, rows, keys]`, with keys
    /// where `key_valid[b * keys + k]` is false receiving exactly zero weight.
    pub fn masked_softmax(&self, a: Var, key_valid: &[bool]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let [batch, rows, keys] = *x.shape() else {
                return Err(Error::shape(
                    "masked_softmax",
                    x.shape(),
                    &[key_valid.len()],
                ));
            };
            if key_valid.len() != batch * keys {
                return Err(Error::shape(
                    "masked_softmax",
                    x.shape(),
                    &[key_valid.len()],
                ));
            }
            let mut out = vec![0.0; x.numel()];
            for b in 0..batch {
                let valid = &key_valid[b * keys..(b + 1) * keys];
                for r in 0..rows {
                    let base = (b * rows + r) * keys;
                    let row = &x.data()[base..base + keys];
                    let max = row
                        .iter()
                        .zip(valid)
                        .filter(|(_, &ok)| ok)
                        .map(|(v, _)| *v)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for k in 0..keys {
                        if valid[k] {
                            let e = (row[k] - max).exp();
                            out[base + k] = e;
                            z += e;
                        }
                    }
                    if z > 0.0 {
                        for o in &mut out[base..base + keys] {
                            *o /= z;
                        }
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::MaskedSoftmax(a), rg))
    }

    /// Selects rows of a matrix (first dimension of any tensor).
    pub fn gather_rows(&self, a: Var, index: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let m = x.rows();
            let width = if m == 0 { 0 } else { x.numel() / m };
            let mut data = Vec::with_capacity(index.len() * width);
            for &i in index {
                if i >= m {
                    return Err(Error::Index {
                        op: "gather_rows",
                        index: i,
                        bound: m,
                    });
                }
                data.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
            }
            let mut shape = x.shape().to_vec();
            if shape.is_empty() {
                return Err(Error::shape("gather_rows", x.shape(), &[index.len()]));
            }
            shape[0] = index.len();
            Tensor::new(shape, data)?
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x: a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| Error::contract("concat_rows of zero tensors"))?;
            let cols = nodes[first.0].value.cols();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                if t.rank() != 2 || t.cols() != cols {
                    return Err(Error::shape(
                        "concat_rows",
                        nodes[first.0].value.shape(),
                        t.shape(),
                    ));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, cols], data)?
        };
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| Error::contract("concat_cols of zero tensors"))?;
            let rows = nodes[first.0].value.rows();
            let mut cols = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                if t.rank() != 2 || t.rows() != rows {
                    return Err(Error::shape(
                        "concat_cols",
                        nodes[first.0].value.shape(),
                        t.shape(),
                    ));
                }
                cols += t.cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row(r));
                }
            }
            Tensor::new(vec![rows, cols], data)?
        };
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Sparse-dense product `A * x` with a constant sparse `A`.
    pub fn spmm(&self, a: &Rc<SparseRows>, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.rank() != 2 || t.rows() != a.cols {
                return Err(Error::shape("spmm", &[a.rows, a.cols], t.shape()));
            }
            let n = t.cols();
            Tensor::new(vec![a.rows, n], a.apply(t.data(), n))?
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SpMM { a: Rc::clone(a), x }, rg))
    }

    /// Batched matrix product over the leading dimension; with `trans_b`
    /// the second operand is `[batch, n, k]` and used transposed.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let (&[ba, m, k], &[bb, p, q]) = (x.shape(), y.shape()) else {
                return Err(Error::shape("bmm", x.shape(), y.shape()));
            };
            let (k2, n) = if trans_b { (q, p) } else { (p, q) };
            if ba != bb || k != k2 {
                return Err(Error::shape("bmm", x.shape(), y.shape()));
            }
            let mut data = Vec::with_capacity(ba * m * n);
            for i in 0..ba {
                let xa = &x.data()[i * m * k..(i + 1) * m * k];
                let yb = &y.data()[i * k * n..(i + 1) * k * n];
                if trans_b {
                    data.extend(mm_nt(xa, yb, m, k, n));
                } else {
                    data.extend(mm(xa, yb, m, k, n));
                }
            }
            Tensor::new(vec![ba, m, n], data)?
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, rg))
    }

    /// `[batch * seq, heads * d] -> [batch * heads, seq, d]`.
    pub fn split_heads(&self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.rank() != 2 || t.rows() != batch * seq || t.cols() % heads != 0 {
                return Err(Error::shape("split_heads", t.shape(), &[batch, seq, heads]));
            }
            let d = t.cols() / heads;
            Tensor::new(
                vec![batch * heads, seq, d],
                split_heads(t.data(), batch, seq, heads, d),
            )?
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            out,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
            rg,
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 3 || t.shape()[0] != batch * heads || t.shape()[1] != seq {
                return Err(Error::shape("merge_heads", t.shape(), &[batch, seq, heads]));
            }
            let d = t.shape()[2];
            Tensor::new(
                vec![batch * seq, heads * d],
                merge_heads(t.data(), batch, seq, heads, d),
            )?
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            out,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
            rg,
        ))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let nodes = self.nodes.borrow();
        let t = &nodes[a.0].value;
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| f(x)).collect(),
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate across fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if loss.0 >= n {
            return Err(Error::contract("loss is not recorded on this tape"));
        }
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = |v: Var, delta: Vec<f64>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(t) => {
                        for (a, d) in t.data_mut().iter_mut().zip(&delta) {
                            *a += d;
                        }
                    }
                    slot @ None => {
                        *slot = Some(Tensor {
                            shape: nodes[v.0].value.shape().to_vec(),
                            data: delta,
                        });
                    }
                }
            };
            let gd = g.data();
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (val(*a).rows(), val(*a).cols());
                    let nn = val(*b).cols();
                    acc(*a, mm_nt(gd, val(*b).data(), m, nn, k));
                    acc(*b, mm_tn(val(*a).data(), gd, k, m, nn));
                }
                Op::Add(a, b) => {
                    acc(*a, gd.to_vec());
                    acc(*b, gd.to_vec());
                }
                Op::AddBias(a, b) => {
                    acc(*a, gd.to_vec());
                    let c = val(*b).numel();
                    let mut gb = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(*b, gb);
                }
                Op::Mul(a, b) => {
                    let ga = gd.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    let gb = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Scale(a, c) => acc(*a, gd.iter().map(|g| g * c).collect()),
                Op::Relu(a) => {
                    let ga = gd
                        .iter()
                        .zip(val(*a).data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    acc(*a, ga);
                }
                Op::Gelu(a) => {
                    let ga = gd
                        .iter()
                        .zip(val(*a).data())
                        .map(|(g, &x)| g * gelu(x).1)
                        .collect();
                    acc(*a, ga);
                }
                Op::Softplus(a) => {
                    let ga = gd
                        .iter()
                        .zip(val(*a).data())
                        .map(|(g, &x)| g * sigmoid(x))
                        .collect();
                    acc(*a, ga);
                }
                Op::Sum(a) => acc(*a, vec![gd[0]; val(*a).numel()]),
                Op::Mean(a) => {
                    let k = val(*a).numel();
                    acc(*a, vec![gd[0] / k as f64; k]);
                }
                Op::RowSum(a) => {
                    let c = val(*a).cols();
                    let ga = gd
                        .iter()
                        .flat_map(|&g| std::iter::repeat(g).take(c))
                        .collect();
                    acc(*a, ga);
                }
                Op::Reshape(a) => acc(*a, gd.to_vec()),
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let c = val(*x).cols();
                    let gv = val(*gain).data();
                    let mut gx = vec![0.0; gd.len()];
                    let mut ggain = vec![0.0; c];
                    let mut gbias = vec![0.0; c];
                    for (i, inv) in inv_std.iter().enumerate() {
                        let grow = &gd[i * c..(i + 1) * c];
                        let hrow = &xhat[i * c..(i + 1) * c];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let gh = grow[j] * gv[j];
                            s1 += gh;
                            s2 += gh * hrow[j];
                            ggain[j] += grow[j] * hrow[j];
                            gbias[j] += grow[j];
                        }
                        let nf = c as f64;
                        for j in 0..c {
                            let gh = grow[j] * gv[j];
                            gx[i * c + j] = inv / nf * (nf * gh - s1 - hrow[j] * s2);
                        }
                    }
                    acc(*x, gx);
                    acc(*gain, ggain);
                    acc(*bias, gbias);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = val(*logits).cols();
                    let scale = gd[0] / labels.len() as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        gl[i * c + l] -= scale;
                    }
                    acc(*logits, gl);
                }
                Op::MaskedSoftmax(a) => {
                    let y = node.value.data();
                    let keys = node.value.cols();
                    let mut ga = vec![0.0; gd.len()];
                    for ((grow, yrow), out) in
                        gd.chunks(keys).zip(y.chunks(keys)).zip(ga.chunks_mut(keys))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for k in 0..keys {
                            out[k] = yrow[k] * (grow[k] - dot);
                        }
                    }
                    acc(*a, ga);
                }
                Op::GatherRows { x, index } => {
                    let t = val(*x);
                    let width = if t.rows() == 0 {
                        0
                    } else {
                        t.numel() / t.rows()
                    };
                    let mut gx = vec![0.0; t.numel()];
                    for (r, &i) in index.iter().enumerate() {
                        let src = &gd[r * width..(r + 1) * width];
                        for (o, v) in gx[i * width..(i + 1) * width].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    acc(*x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let len = val(*p).numel();
                        acc(*p, gd[at..at + len].to_vec());
                        at += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let t = val(*p);
                        let c = t.cols();
                        let mut gp = Vec::with_capacity(t.numel());
                        for r in 0..t.rows() {
                            gp.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                        }
                        acc(*p, gp);
                        offset += c;
                    }
                }
                Op::SpMM { a, x } => {
                    let ncols = node.value.cols();
                    acc(*x, a.apply_transposed(gd, ncols));
                }
                Op::Bmm { a, b, trans_b } => {
                    let (xa, yb) = (val(*a), val(*b));
                    let [batch, m, k] = *xa.shape() else {
                        unreachable!()
                    };
                    let nn = node.value.shape()[2];
                    let mut ga = Vec::with_capacity(xa.numel());
                    let mut gb = Vec::with_capacity(yb.numel());
                    for i in 0..batch {
                        let gi = &gd[i * m * nn..(i + 1) * m * nn];
                        let ai = &xa.data()[i * m * k..(i + 1) * m * k];
                        let bi = &yb.data()[i * k * nn..(i + 1) * k * nn];
                        if *trans_b {
                            ga.extend(mm(gi, bi, m, nn, k));
                            gb.extend(mm_tn(gi, ai, nn, m, k));
                        } else {
                            ga.extend(mm_nt(gi, bi, m, nn, k));
                            gb.extend(mm_tn(ai, gi, k, m, nn));
                        }
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::SplitHeads {
                    x,
                    batch,
                    seq,
                    heads,
                } => {
                    let d = node.value.shape()[2];
                    acc(*x, merge_heads(gd, *batch, *seq, *heads, d));
                }
                Op::MergeHeads {
                    x,
                    batch,
                    seq,
                    heads,
                } => {
                    let d = node.value.cols() / heads;
                    acc(*x, split_heads(gd, *batch, *seq, *heads, d));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn split_heads(x: &[f64], batch: usize, seq: usize, heads: usize, d: usize) -> Vec<f64> {
    let f = heads * d;
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for s in 0..seq {
            let row = &x[(b * seq + s) * f..(b * seq + s + 1) * f];
            for h in 0..heads {
                let dst = ((b * heads + h) * seq + s) * d;
                out[dst..dst + d].copy_from_slice(&row[h * d..(h + 1) * d]);
            }
        }
    }
    out
}

fn merge_heads(x: &[f64], batch: usize, seq: usize, heads: usize, d: usize) -> Vec<f64> {
    let f = heads * d;
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for h in 0..heads {
            for s in 0..seq {
                let src = ((b * heads + h) * seq + s) * d;
                let dst = (b * seq + s) * f + h * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Value and derivative of tanh-approximated GELU.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(tape: &Tape, loss: Var, x: Var) -> Vec<f64> {
        tape.backward(loss).unwrap().get(x).unwrap().data().to_vec()
    }

    #[test]
    fn relu_values() {
        let t = Tape::new();
        let x = t.variable(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(t.value(t.relu(x)).data(), &[0.0, 0.0, 2.0]);
        let y = t.variable(Tensor::vector(vec![0.5, 3.0]));
        assert_eq!(t.value(t.relu(y)).data(), &[0.5, 3.0]);
    }

    #[test]
    fn relu_gradient_matches_finite_difference() {
        for (x0, expected) in [(3.0, 1.0), (-3.0, 0.0)] {
            let t = Tape::new();
            let x = t.variable(Tensor::vector(vec![x0]));
            let loss = t.sum(t.relu(x));
            let g = grad_of(&t, loss, x)[0];
            let h = 1e-3;
            let fd = ((x0 + h).max(0.0) - (x0 - h).max(0.0)) / (2.0 * h);
            assert!((g - fd).abs() < 1e-12);
            assert_eq!(g, expected);
        }
    }

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(100.0) - 100.0).abs() < 1e-12);
        assert!(softplus(1000.0).is_finite());
        assert!((softplus(1.0) - 1.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        let t = Tape::new();
        let uniform = t.constant(Tensor::zeros(&[1, 4]));
        let l = t.softmax_cross_entropy(uniform, &[2]).unwrap();
        assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let sat = t.constant(Tensor::from_rows(&[vec![0.0, 1000.0, 0.0]]).unwrap());
        let l = t.softmax_cross_entropy(sat, &[1]).unwrap();
        assert!(t.value(l).item().abs() < 1e-12);

        let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let l = t.softmax_cross_entropy(x, &[2]).unwrap();
        assert!((t.value(l).item() - 0.4076).abs() < 1e-4);

        assert!(matches!(
            t.softmax_cross_entropy(x, &[3]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn layer_norm_cases() {
        let t = Tape::new();
        let gain = t.constant(Tensor::full(&[2], 1.0));
        let bias = t.constant(Tensor::zeros(&[2]));
        let c = t.constant(Tensor::from_rows(&[vec![3.0, 3.0]]).unwrap());
        assert_eq!(
            t.value(t.layer_norm(c, gain, bias).unwrap()).data(),
            &[0.0, 0.0]
        );
        let r = t.constant(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
        let y = t.layer_norm(r, gain, bias).unwrap();
        let v = t.value(y);
        assert!((v.data()[0] - 1.0).abs() < 1e-9 && (v.data()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn backward_basic_cases() {
        let t = Tape::new();
        let x = t.variable(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.sum(x);
        assert_eq!(grad_of(&t, s, x), vec![1.0, 1.0, 1.0]);

        let t = Tape::new();
        let x = t.variable(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        assert_eq!(grad_of(&t, s, x), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tape::new();
        let x = t.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let t = Tape::new();
        let x = t.variable(Tensor::vector(vec![1.5]));
        let y = t.add(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let s = t.sum(z);
        assert_eq!(grad_of(&t, s, x), vec![3.0]);
    }

    #[test]
    fn no_grad_tape_records_no_gradients() {
        let t = Tape::no_grad();
        let x = t.variable(Tensor::vector(vec![1.0]));
        let s = t.sum(x);
        assert!(t.backward(s).unwrap().get(x).is_none());
    }

    #[test]
    fn heads_round_trip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let split = split_heads(&data, 2, 3, 2, 2);
        assert_eq!(merge_heads(&split, 2, 3, 2, 2), data);
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 1, 3], vec![0.3, 5.0, -1.0]).unwrap());
        let y = t.masked_softmax(x, &[true, false, true]).unwrap();
        let v = t.value(y);
        assert_eq!(v.data()[1], 0.0);
        assert!((v.data()[0] + v.data()[2] - 1.0).abs() < 1e-15);
    }
}
