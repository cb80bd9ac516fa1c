//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order; `backward` walks it in reverse exactly once. Nodes that
//! do not depend on any gradient-requiring leaf are skipped entirely, which is
//! what makes frozen-encoder fine-tuning cheap.

use crate::error::{Error, Result};
use crate::numerics::nn::ParamStore;
use crate::numerics::tensor::{kernels, Scalar, Tensor};

/// Pre-softmax logit written into masked attention slots.
pub const MASK_LOGIT: f64 = -1e9;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, S),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Reshape(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    GatherFlat {
        x: NodeId,
        idx: Vec<usize>,
    },
    GroupMean {
        x: NodeId,
        group: usize,
    },
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        group: usize,
        probs: Vec<S>,
    },
    Lstm {
        xw: NodeId,
        wh: NodeId,
        gates: Vec<S>,
        cells: Vec<S>,
    },
    Conv3x3 {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        height: usize,
        width: usize,
    },
    Upsample2x {
        x: NodeId,
        height: usize,
        width: usize,
    },
    Sum(NodeId),
    Mse {
        a: NodeId,
        b: NodeId,
        weights: Option<Vec<S>>,
        denom: S,
    },
    Mae {
        a: NodeId,
        b: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// The computation record for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Parameter leaves of one forward pass, indexed like the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    ids: Vec<NodeId>,
    names: Vec<String>,
}

impl Bound {
    pub fn get(&self, param: crate::numerics::nn::ParamId) -> NodeId {
        self.ids[param.index()]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }
}

/// Gradient slots for every node of a graph after `backward`.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    slots: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `node`; zeros if the node does not
    /// influence the loss.
    pub fn wrt(&self, node: NodeId) -> Tensor<S> {
        match &self.slots[node.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[node.0]),
        }
    }

    /// `None` when no gradient reached the node.
    pub fn get(&self, node: NodeId) -> Option<&Tensor<S>> {
        self.slots[node.0].as_ref()
    }

    /// Gradients for all bound parameters, in registry order.
    pub fn params(&self, bound: &Bound) -> Vec<Option<Tensor<S>>> {
        bound.ids.iter().map(|&id| self.slots[id.0].clone()).collect()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation; returns (value, derivative)
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let a = S::of(0.044715);
    let half = S::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let value = half * x * (S::one() + t);
    let du = c * (S::one() + S::of(3.0) * a * x * x);
    let deriv = half * (S::one() + t) + half * x * (S::one() - t * t) * du;
    (value, deriv)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[NodeId]) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor<S>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Creates one leaf per registered parameter. Parameters for which
    /// `trainable` is false become constants.
    pub fn bind(&mut self, store: &ParamStore<S>, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut ids = Vec::with_capacity(store.len());
        let mut names = Vec::with_capacity(store.len());
        for (name, value) in store.iter() {
            let id = if trainable(name) {
                self.variable(value.clone())
            } else {
                self.constant(value.clone())
            };
            ids.push(id);
            names.push(name.to_string());
        }
        Bound { ids, names }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn val(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn as_matrix(&self, id: NodeId) -> (usize, usize) {
        let v = self.val(id);
        (v.rows(), v.cols())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = crate::numerics::tensor::matmul(self.val(a), self.val(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip(&mut self, a: NodeId, b: NodeId, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (va, vb) = (self.val(a), self.val(b));
        if va.shape() != vb.shape() {
            return Err(dim_err(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x[n, m] + row[m]`, broadcasting the row over all n rows.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (vx, vr) = (self.val(x), self.val(row));
        let m = vx.cols();
        if vr.len() != m {
            return Err(dim_err("add_row", vx.shape(), vr.shape()));
        }
        let mut out = vx.clone();
        for chunk in out.data_mut().chunks_mut(m) {
            for (o, &r) in chunk.iter_mut().zip(vr.data()) {
                *o += r;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = S::of(c);
        let mut out = self.val(x).clone();
        out.scale(c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    fn map(&mut self, x: NodeId, f: impl Fn(S) -> S) -> Tensor<S> {
        let v = self.val(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect()).expect("same shape")
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.map(x, |a| a.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.map(x, sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.map(x, |a| a.max(S::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.map(x, |a| gelu_parts(a).0);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.val(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.as_matrix(x);
        if start + len > c {
            return Err(dim_err("slice_cols", self.shape(x), &[start, len]));
        }
        let v = self.val(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Rows of `x` selected (with repetition allowed) by `idx`.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (r, c) = self.as_matrix(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(dim_err("gather_rows", self.shape(x), &[bad]));
        }
        let v = self.val(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Places row `i` of `x` at row `idx[i]` of an `n`-row zero matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, x: NodeId, idx: &[usize], n: usize) -> Result<NodeId> {
        let (r, c) = self.as_matrix(x);
        if r != idx.len() || idx.iter().any(|&i| i >= n) {
            return Err(dim_err("scatter_rows", self.shape(x), &[idx.len(), n]));
        }
        let mut seen = vec![false; n];
        for &i in idx {
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("scatter_rows: duplicate target row {i}")));
            }
        }
        let v = self.val(x);
        let mut data = vec![S::zero(); n * c];
        for (src, &dst) in idx.iter().enumerate() {
            data[dst * c..(dst + 1) * c].copy_from_slice(&v.data()[src * c..(src + 1) * c]);
        }
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(out, Op::ScatterRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Arbitrary element gather: `out.flat[i] = x.flat[idx[i]]`.
    pub fn gather_flat(&mut self, x: NodeId, idx: Vec<usize>, shape: &[usize]) -> Result<NodeId> {
        let v = self.val(x);
        let n: usize = shape.iter().product();
        if n != idx.len() || idx.iter().any(|&i| i >= v.len()) {
            return Err(dim_err("gather_flat", v.shape(), shape));
        }
        let data = idx.iter().map(|&i| v.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::GatherFlat { x, idx }, &[x]))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.as_matrix(x);
        let mut idx = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                idx.push(i * c + j);
            }
        }
        self.gather_flat(x, idx, &[c, r])
    }

    /// Mean over consecutive blocks of `group` rows: `[n·group, d] → [n, d]`.
    pub fn group_mean(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let (r, c) = self.as_matrix(x);
        if group == 0 || r % group != 0 {
            return Err(dim_err("group_mean", self.shape(x), &[group]));
        }
        let n = r / group;
        let inv = S::one() / S::of(group as f64);
        let v = self.val(x);
        let mut data = vec![S::zero(); n * c];
        for i in 0..r {
            let o = i / group;
            for j in 0..c {
                data[o * c + j] += v.data()[i * c + j] * inv;
            }
        }
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(out, Op::GroupMean { x, group }, &[x]))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (_, c) = self.as_matrix(x);
        let mut out = self.val(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (r, c) = self.as_matrix(x);
        if self.val(gamma).len() != c || self.val(beta).len() != c {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let v = self.val(x);
        let (g, b) = (self.val(gamma).data(), self.val(beta).data());
        let mut xhat = vec![S::zero(); r * c];
        let mut rstd = vec![S::zero(); r];
        let mut out = vec![S::zero(); r * c];
        let nc = S::of(c as f64);
        for i in 0..r {
            let row = &v.data()[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<S>() / nc;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<S>() / nc;
            let rs = S::one() / (var + S::of(LN_EPS)).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head scaled dot-product attention over independent sequences.
    ///
    /// `q`, `k`, `v` are `[n·group, d]`; rows are split into consecutive
    /// sequences of length `group`, attention never crosses sequences. With
    /// `causal`, position `i` sees only positions `≤ i`: later logits are set
    /// to [`MASK_LOGIT`] before the softmax.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        group: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let (rows, d) = self.as_matrix(q);
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(dim_err("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {d} is not divisible by {heads} attention heads"
            )));
        }
        if group == 0 || rows % group != 0 {
            return Err(dim_err("attention", self.shape(q), &[group]));
        }
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let nseq = rows / group;
        let (qd, kd, vd) = (self.val(q).data(), self.val(k).data(), self.val(v).data());
        let mut probs = vec![S::zero(); nseq * heads * group * group];
        let mut out = vec![S::zero(); rows * d];
        let mask = S::of(MASK_LOGIT);
        for s in 0..nseq {
            for h in 0..heads {
                let pbase = (s * heads + h) * group * group;
                for i in 0..group {
                    let qi = &qd[(s * group + i) * d + h * dh..][..dh];
                    let prow = &mut probs[pbase + i * group..pbase + (i + 1) * group];
                    for (j, p) in prow.iter_mut().enumerate() {
                        if causal && j > i {
                            *p = mask;
                        } else {
                            let kj = &kd[(s * group + j) * d + h * dh..][..dh];
                            let mut acc = S::zero();
                            for (&a, &b) in qi.iter().zip(kj) {
                                acc += a * b;
                            }
                            *p = acc * scale;
                        }
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(s * group + i) * d + h * dh..][..dh];
                    for (j, &p) in prow.iter().enumerate() {
                        if p == S::zero() {
                            continue;
                        }
                        let vj = &vd[(s * group + j) * d + h * dh..][..dh];
                        for (o, &b) in orow.iter_mut().zip(vj) {
                            *o += p * b;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                group,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Unidirectional LSTM recurrence.
    ///
    /// `xw` is the pre-computed input projection `[len, 4h]` (bias included),
    /// gate order input, forget, cell, output. `wh` is the recurrent matrix
    /// `[h, 4h]`. Initial hidden and cell states are zero. Returns `[len, h]`.
    pub fn lstm(&mut self, xw: NodeId, wh: NodeId) -> Result<NodeId> {
        let (len, four_h) = self.as_matrix(xw);
        let (hr, hc) = self.as_matrix(wh);
        if four_h % 4 != 0 || hr * 4 != four_h || hc != four_h {
            return Err(dim_err("lstm", self.shape(xw), self.shape(wh)));
        }
        let h = hr;
        let (xd, wd) = (self.val(xw).data(), self.val(wh).data());
        let mut gates = vec![S::zero(); len * four_h];
        let mut cells = vec![S::zero(); len * h];
        let mut hidden = vec![S::zero(); len * h];
        let mut z = vec![S::zero(); four_h];
        for t in 0..len {
            z.copy_from_slice(&xd[t * four_h..(t + 1) * four_h]);
            if t > 0 {
                let hprev = &hidden[(t - 1) * h..t * h];
                kernels::mm(hprev, wd, &mut z, 1, h, four_h);
            }
            let g = &mut gates[t * four_h..(t + 1) * four_h];
            for j in 0..h {
                g[j] = sigmoid(z[j]);
                g[h + j] = sigmoid(z[h + j]);
                g[2 * h + j] = z[2 * h + j].tanh();
                g[3 * h + j] = sigmoid(z[3 * h + j]);
            }
            for j in 0..h {
                let cprev = if t > 0 { cells[(t - 1) * h + j] } else { S::zero() };
                let c = g[h + j] * cprev + g[j] * g[2 * h + j];
                cells[t * h + j] = c;
                hidden[t * h + j] = g[3 * h + j] * c.tanh();
            }
        }
        let out = Tensor::new(vec![len, h], hidden)?;
        Ok(self.push(out, Op::Lstm { xw, wh, gates, cells }, &[xw, wh]))
    }

    /// Same-padded 3×3 convolution. `x` is `[c_in, height·width]`, `w` is
    /// `[c_out, c_in·9]`, `b` is `[c_out]`.
    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let (cin, hw) = self.as_matrix(x);
        let (cout, wk) = self.as_matrix(w);
        if hw != height * width || wk != cin * 9 || self.val(b).len() != cout {
            return Err(dim_err("conv3x3", self.shape(x), self.shape(w)));
        }
        let cols = im2col(self.val(x).data(), cin, height, width);
        let mut out = vec![S::zero(); cout * hw];
        kernels::mm(self.val(w).data(), &cols, &mut out, cout, cin * 9, hw);
        let bd = self.val(b).data();
        for (o, chunk) in out.chunks_mut(hw).enumerate() {
            for a in chunk {
                *a += bd[o];
            }
        }
        let out = Tensor::new(vec![cout, hw], out)?;
        Ok(self.push(out, Op::Conv3x3 { x, w, b, height, width }, &[x, w, b]))
    }

    /// Nearest-neighbour ×2 upsampling of `[c, height·width]`.
    pub fn upsample2x(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let (c, hw) = self.as_matrix(x);
        if hw != height * width {
            return Err(dim_err("upsample2x", self.shape(x), &[height, width]));
        }
        let v = self.val(x).data();
        let (h2, w2) = (2 * height, 2 * width);
        let mut out = vec![S::zero(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[ch * h2 * w2 + y * w2 + xx] = v[ch * hw + (y / 2) * width + xx / 2];
                }
            }
        }
        let out = Tensor::new(vec![c, h2 * w2], out)?;
        Ok(self.push(out, Op::Upsample2x { x, height, width }, &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.val(x).data().iter().copied().sum::<S>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn add_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut acc = *xs
            .first()
            .ok_or_else(|| Error::Contract("add_scalars of an empty list".into()))?;
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Mean squared error between two nodes of equal shape. With `weights`,
    /// each squared difference is multiplied by its weight and the sum is
    /// divided by the weight total.
    pub fn mse(&mut self, a: NodeId, b: NodeId, weights: Option<Vec<S>>) -> Result<NodeId> {
        let (va, vb) = (self.val(a), self.val(b));
        if va.shape() != vb.shape() {
            return Err(dim_err("mse", va.shape(), vb.shape()));
        }
        let denom = match &weights {
            Some(w) => {
                if w.len() != va.len() {
                    return Err(dim_err("mse weights", va.shape(), &[w.len()]));
                }
                w.iter().copied().sum::<S>()
            }
            None => S::of(va.len() as f64),
        };
        if denom <= S::zero() {
            return Err(Error::Domain("mse over an empty selection".into()));
        }
        let mut acc = S::zero();
        for (i, (&x, &y)) in va.data().iter().zip(vb.data()).enumerate() {
            let d = x - y;
            let w = weights.as_ref().map_or(S::one(), |w| w[i]);
            acc += w * d * d;
        }
        let out = Tensor::scalar(acc / denom);
        Ok(self.push(out, Op::Mse { a, b, weights, denom }, &[a, b]))
    }

    pub fn mae(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.val(a), self.val(b));
        if va.shape() != vb.shape() {
            return Err(dim_err("mae", va.shape(), vb.shape()));
        }
        if va.is_empty() {
            return Err(Error::Domain("mae over an empty tensor".into()));
        }
        let acc = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).abs()).sum::<S>();
        let out = Tensor::scalar(acc / S::of(va.len() as f64));
        Ok(self.push(out, Op::Mae { a, b }, &[a, b]))
    }

    /// Mean cross entropy of row-wise logits `[n, classes]` against labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, c) = self.as_matrix(logits);
        if labels.len() != n || labels.iter().any(|&l| l >= c) {
            return Err(dim_err("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        let mut probs = self.val(logits).data().to_vec();
        let mut loss = S::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            softmax_in_place(row);
            loss -= row[labels[i]].max(S::of(1e-30)).ln();
        }
        let out = Tensor::scalar(loss / S::of(n as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let lv = self.val(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut slots: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(Tensor::full(lv.shape(), S::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = slots[i].take() else { continue };
            self.backprop_node(i, &grad, &mut slots);
            slots[i] = Some(grad);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { slots, shapes })
    }

    fn acc(&self, slots: &mut [Option<Tensor<S>>], id: NodeId, f: impl FnOnce(&mut [S])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = slots[id.0].get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.shape()));
        f(slot.data_mut());
    }

    fn backprop_node(&self, i: usize, grad: &Tensor<S>, slots: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        let gd = grad.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                self.acc(slots, *a, |da| kernels::mm_bt(gd, vb.data(), da, m, n, k));
                self.acc(slots, *b, |db| kernels::mm_at(va.data(), gd, db, k, m, n));
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    self.acc(slots, *p, |d| add_into(d, gd));
                }
            }
            Op::Sub(a, b) => {
                self.acc(slots, *a, |d| add_into(d, gd));
                self.acc(slots, *b, |d| {
                    for (x, &g) in d.iter_mut().zip(gd) {
                        *x -= g;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                self.acc(slots, *a, |d| {
                    for ((x, &g), &o) in d.iter_mut().zip(gd).zip(vb) {
                        *x += g * o;
                    }
                });
                self.acc(slots, *b, |d| {
                    for ((x, &g), &o) in d.iter_mut().zip(gd).zip(va) {
                        *x += g * o;
                    }
                });
            }
            Op::AddRow(x, row) => {
                let m = self.val(*row).len();
                self.acc(slots, *x, |d| add_into(d, gd));
                self.acc(slots, *row, |d| {
                    for chunk in gd.chunks(m) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(slots, *x, |d| {
                    for (a, &g) in d.iter_mut().zip(gd) {
                        *a += g * *c;
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.acc(slots, *x, |d| {
                    for ((a, &g), &t) in d.iter_mut().zip(gd).zip(y) {
                        *a += g * (S::one() - t * t);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.acc(slots, *x, |d| {
                    for ((a, &g), &s) in d.iter_mut().zip(gd).zip(y) {
                        *a += g * s * (S::one() - s);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.val(*x).data();
                self.acc(slots, *x, |d| {
                    for ((a, &g), &v) in d.iter_mut().zip(gd).zip(xv) {
                        if v > S::zero() {
                            *a += g;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.val(*x).data();
                self.acc(slots, *x, |d| {
                    for ((a, &g), &v) in d.iter_mut().zip(gd).zip(xv) {
                        *a += g * gelu_parts(v).1;
                    }
                });
            }
            Op::Reshape(x) => self.acc(slots, *x, |d| add_into(d, gd)),
            Op::SliceCols { x, start } => {
                let c = self.val(*x).cols();
                let len = grad.cols();
                self.acc(slots, *x, |d| {
                    for (r, chunk) in gd.chunks(len).enumerate() {
                        add_into(&mut d[r * c + start..r * c + start + len], chunk);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = grad.cols();
                self.acc(slots, *x, |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut d[src * c..(src + 1) * c], &gd[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::ScatterRows { x, idx } => {
                let c = grad.cols();
                self.acc(slots, *x, |d| {
                    for (r, &dst) in idx.iter().enumerate() {
                        add_into(&mut d[r * c..(r + 1) * c], &gd[dst * c..(dst + 1) * c]);
                    }
                });
            }
            Op::GatherFlat { x, idx } => {
                self.acc(slots, *x, |d| {
                    for (&src, &g) in idx.iter().zip(gd) {
                        d[src] += g;
                    }
                });
            }
            Op::GroupMean { x, group } => {
                let c = grad.cols();
                let inv = S::one() / S::of(*group as f64);
                self.acc(slots, *x, |d| {
                    for (r, chunk) in d.chunks_mut(c).enumerate() {
                        let o = r / group;
                        for (a, &g) in chunk.iter_mut().zip(&gd[o * c..(o + 1) * c]) {
                            *a += g * inv;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = grad.cols();
                let y = node.value.data();
                self.acc(slots, *x, |d| {
                    for r in 0..grad.rows() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &gd[r * c..(r + 1) * c];
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            d[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = grad.cols();
                let r = grad.rows();
                let gv = self.val(*gamma).data();
                self.acc(slots, *gamma, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += gd[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                self.acc(slots, *beta, |d| {
                    for chunk in gd.chunks(c) {
                        add_into(d, chunk);
                    }
                });
                let nc = S::of(c as f64);
                self.acc(slots, *x, |d| {
                    for i in 0..r {
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..c {
                            let dh = gd[i * c + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dh = gd[i * c + j] * gv[j];
                            d[i * c + j] += rstd[i] / nc * (nc * dh - s1 - xhat[i * c + j] * s2);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                group,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, *group, probs, gd, slots),
            Op::Lstm { xw, wh, gates, cells } => {
                self.backprop_lstm(*xw, *wh, gates, cells, node.value.data(), gd, slots)
            }
            Op::Conv3x3 { x, w, b, height, width } => {
                let (cin, hw) = (self.val(*x).rows(), height * width);
                let cout = grad.rows();
                let cols = im2col(self.val(*x).data(), cin, *height, *width);
                self.acc(slots, *w, |d| kernels::mm_bt(gd, &cols, d, cout, hw, cin * 9));
                self.acc(slots, *b, |d| {
                    for (o, chunk) in gd.chunks(hw).enumerate() {
                        d[o] += chunk.iter().copied().sum::<S>();
                    }
                });
                if self.requires_grad(*x) {
                    let mut dcols = vec![S::zero(); cin * 9 * hw];
                    kernels::mm_at(self.val(*w).data(), gd, &mut dcols, cin * 9, cout, hw);
                    self.acc(slots, *x, |d| col2im_add(&dcols, d, cin, *height, *width));
                }
            }
            Op::Upsample2x { x, height, width } => {
                let (h2, w2) = (2 * height, 2 * width);
                let c = grad.rows();
                self.acc(slots, *x, |d| {
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                d[ch * height * width + (y / 2) * width + xx / 2] += gd[ch * h2 * w2 + y * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g = gd[0];
                self.acc(slots, *x, |d| {
                    for a in d {
                        *a += g;
                    }
                });
            }
            Op::Mse { a, b, weights, denom } => {
                let g = gd[0] * S::of(2.0) / *denom;
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                let w = |i: usize| weights.as_ref().map_or(S::one(), |w| w[i]);
                self.acc(slots, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g * w(i) * (va[i] - vb[i]);
                    }
                });
                self.acc(slots, *b, |d| {
                    for i in 0..d.len() {
                        d[i] -= g * w(i) * (va[i] - vb[i]);
                    }
                });
            }
            Op::Mae { a, b } => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                let g = gd[0] / S::of(va.len() as f64);
                let sign = |x: S| {
                    if x > S::zero() {
                        S::one()
                    } else if x < S::zero() {
                        -S::one()
                    } else {
                        S::zero()
                    }
                };
                self.acc(slots, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g * sign(va[i] - vb[i]);
                    }
                });
                self.acc(slots, *b, |d| {
                    for i in 0..d.len() {
                        d[i] -= g * sign(va[i] - vb[i]);
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.val(*logits).cols();
                let g = gd[0] / S::of(labels.len() as f64);
                self.acc(slots, *logits, |d| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let y = if j == l { S::one() } else { S::zero() };
                            d[r * c + j] += g * (probs[r * c + j] - y);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        group: usize,
        probs: &[S],
        gd: &[S],
        slots: &mut [Option<Tensor<S>>],
    ) {
        let (rows, d) = self.as_matrix(q);
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let nseq = rows / group;
        let (qd, kd, vd) = (self.val(q).data(), self.val(k).data(), self.val(v).data());
        let mut dq = vec![S::zero(); rows * d];
        let mut dk = vec![S::zero(); rows * d];
        let mut dv = vec![S::zero(); rows * d];
        let mut dp = vec![S::zero(); group];
        for s in 0..nseq {
            for h in 0..heads {
                let pbase = (s * heads + h) * group * group;
                for i in 0..group {
                    let prow = &probs[pbase + i * group..pbase + (i + 1) * group];
                    let go = &gd[(s * group + i) * d + h * dh..][..dh];
                    let mut dot = S::zero();
                    for j in 0..group {
                        let p = prow[j];
                        if p == S::zero() {
                            dp[j] = S::zero();
                            continue;
                        }
                        let vj = &vd[(s * group + j) * d + h * dh..][..dh];
                        let dvj = &mut dv[(s * group + j) * d + h * dh..][..dh];
                        let mut acc = S::zero();
                        for t in 0..dh {
                            dvj[t] += p * go[t];
                            acc += go[t] * vj[t];
                        }
                        dp[j] = acc;
                        dot += p * acc;
                    }
                    for j in 0..group {
                        let p = prow[j];
                        if p == S::zero() {
                            continue;
                        }
                        let ds = p * (dp[j] - dot) * scale;
                        let qrow = (s * group + i) * d + h * dh;
                        let krow = (s * group + j) * d + h * dh;
                        for t in 0..dh {
                            dq[qrow + t] += ds * kd[krow + t];
                            dk[krow + t] += ds * qd[qrow + t];
                        }
                    }
                }
            }
        }
        self.acc(slots, q, |x| add_into(x, &dq));
        self.acc(slots, k, |x| add_into(x, &dk));
        self.acc(slots, v, |x| add_into(x, &dv));
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_lstm(
        &self,
        xw: NodeId,
        wh: NodeId,
        gates: &[S],
        cells: &[S],
        hidden: &[S],
        gd: &[S],
        slots: &mut [Option<Tensor<S>>],
    ) {
        let (len, four_h) = self.as_matrix(xw);
        let h = four_h / 4;
        let wd = self.val(wh).data();
        let mut dz_all = vec![S::zero(); len * four_h];
        let mut dh_next = vec![S::zero(); h];
        let mut dc_next = vec![S::zero(); h];
        for t in (0..len).rev() {
            let g = &gates[t * four_h..(t + 1) * four_h];
            let dz = &mut dz_all[t * four_h..(t + 1) * four_h];
            for j in 0..h {
                let (ig, fg, cg, og) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let c = cells[t * h + j];
                let tc = c.tanh();
                let dh = gd[t * h + j] + dh_next[j];
                let dc = dh * og * (S::one() - tc * tc) + dc_next[j];
                let cprev = if t > 0 { cells[(t - 1) * h + j] } else { S::zero() };
                dz[j] = dc * cg * ig * (S::one() - ig);
                dz[h + j] = dc * cprev * fg * (S::one() - fg);
                dz[2 * h + j] = dc * ig * (S::one() - cg * cg);
                dz[3 * h + j] = dh * tc * og * (S::one() - og);
                dc_next[j] = dc * fg;
            }
            dh_next.iter_mut().for_each(|a| *a = S::zero());
            if t > 0 {
                kernels::mm_bt(dz, wd, &mut dh_next, 1, four_h, h);
            }
        }
        if self.requires_grad(wh) {
            // dWh = Σ_t h_{t-1}ᵀ dz_t
            self.acc(slots, wh, |d| {
                if len > 1 {
                    kernels::mm_at(&hidden[..(len - 1) * h], &dz_all[four_h..], d, h, len - 1, four_h);
                }
            });
        }
        self.acc(slots, xw, |d| add_into(d, &dz_all));
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for a in row.iter_mut() {
        *a = (*a - max).exp();
        total += *a;
    }
    for a in row.iter_mut() {
        *a /= total;
    }
}

fn im2col<S: Scalar>(x: &[S], cin: usize, height: usize, width: usize) -> Vec<S> {
    let hw = height * width;
    let mut cols = vec![S::zero(); cin * 9 * hw];
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * hw;
                for y in 0..height {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    for xx in 0..width {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= width as isize {
                            continue;
                        }
                        cols[row + y * width + xx] = x[c * hw + sy as usize * width + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<S: Scalar>(cols: &[S], dx: &mut [S], cin: usize, height: usize, width: usize) {
    let hw = height * width;
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * hw;
                for y in 0..height {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    for xx in 0..width {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= width as isize {
                            continue;
                        }
                        dx[c * hw + sy as usize * width + sx as usize] += cols[row + y * width + xx];
                    }
                }
            }
        }
    }
}
