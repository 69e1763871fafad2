//! Reverse-mode automatic differentiation on a tape of tensor ops.
//!
//! A [`Graph`] records nodes in construction order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Ops save whatever forward intermediates their backward rule needs
//! (softmax weights, layer norm statistics, cross-entropy probabilities)
//! instead of recomputing them.
//!
//! Reductions run in a fixed sequential element order everywhere, so a
//! rebuilt graph over the same values produces bitwise identical values
//! and gradients.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{Scalar, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum Op<E: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Rank-2 `[r, c]` plus rank-1 `[c]` broadcast over rows.
    AddRow(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Gelu(NodeId),
    Sum(NodeId),
    /// Row-wise softmax; the node value holds the probabilities.
    Softmax(NodeId),
    LayerNorm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<E>,
        rstd: Vec<E>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// Multi-head causal self-attention over packed `[t, dim]` inputs.
    /// `weights[h]` is the lower-triangular `[t, t]` softmax matrix.
    CausalAttention {
        query: NodeId,
        key: NodeId,
        value: NodeId,
        heads: usize,
        weights: Vec<Tensor<E>>,
    },
    /// Mean negative log-likelihood over masked-in positions.
    MaskedCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Tensor<E>,
    },
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op<E>,
}

pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = va.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += v;
        }
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = va.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(vb.data()) {
            *o *= v;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let ok = matches!((va.shape(), vb.shape()), ([_, c], [c2]) if c == c2);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let cols = vb.numel();
        let row = vb.data().to_vec();
        let mut out = va.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += row[i % cols];
        }
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let lhs = va.shape().to_vec();
        let rhs = vb.shape().to_vec();
        let (m, k) = va.dims2().map_err(|_| Error::ShapeMismatch {
            op: "matmul",
            lhs: lhs.clone(),
            rhs: rhs.clone(),
        })?;
        let (k2, n) = vb.dims2().map_err(|_| Error::ShapeMismatch {
            op: "matmul",
            lhs: lhs.clone(),
            rhs: rhs.clone(),
        })?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs,
                rhs,
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        linalg::matmul_acc(va.data(), vb.data(), out.data_mut(), m, k, n);
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(gelu_fwd);
        self.push(out, Op::Gelu(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = E::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::Sum(x))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, cols) = vx.dims2()?;
        let mut out = vx.clone();
        for r in 0..rows {
            softmax_row(&mut out.data_mut()[r * cols..(r + 1) * cols]);
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn layer_norm(&mut self, input: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let vx = self.value(input);
        let (rows, cols) = vx.dims2()?;
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let s = self.value(id).shape();
            if s != [cols] {
                return Err(Error::ShapeMismatch {
                    op: if name == "gain" { "layer_norm gain" } else { "layer_norm bias" },
                    lhs: vec![rows, cols],
                    rhs: s.to_vec(),
                });
            }
        }
        let eps = E::from_f64(eps);
        let inv_cols = E::ONE / E::from_f64(cols as f64);
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(input).clone();
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let mut mu = E::ZERO;
            for &v in row.iter() {
                mu += v;
            }
            mu *= inv_cols;
            let mut var = E::ZERO;
            for &v in row.iter() {
                let d = v - mu;
                var += d * d;
            }
            var *= inv_cols;
            let rs = E::ONE / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) * rs * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                input,
                gain,
                bias,
                mean,
                rstd,
            },
        ))
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let vt = self.value(table);
        let (vocab, dim) = vt.dims2()?;
        let mut idx = Vec::with_capacity(ids.len());
        for &id in ids {
            if (id as usize) >= vocab {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: vocab,
                });
            }
            idx.push(id as usize);
        }
        if idx.is_empty() {
            return Err(Error::InvalidTensor("embedding over empty id sequence".into()));
        }
        let mut out = Tensor::zeros(&[idx.len(), dim]);
        for (t, &i) in idx.iter().enumerate() {
            out.data_mut()[t * dim..(t + 1) * dim].copy_from_slice(&vt.data()[i * dim..(i + 1) * dim]);
        }
        Ok(self.push(out, Op::Embedding { table, ids: idx }))
    }

    /// Multi-head scaled-dot-product attention with a causal mask:
    /// position `t` attends to positions `0..=t` only.
    pub fn causal_attention(&mut self, query: NodeId, key: NodeId, value: NodeId, heads: usize) -> Result<NodeId> {
        let (t, dim) = self.value(query).dims2()?;
        for (other, name) in [(key, "key"), (value, "value")] {
            let s = self.value(other).shape();
            if s != [t, dim] {
                return Err(Error::ShapeMismatch {
                    op: if name == "key" { "attention query/key" } else { "attention query/value" },
                    lhs: vec![t, dim],
                    rhs: s.to_vec(),
                });
            }
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        let dh = dim / heads;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let q = self.value(query).data().to_vec();
        let k = self.value(key).data().to_vec();
        let v = self.value(value).data().to_vec();
        let mut out = Tensor::zeros(&[t, dim]);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut w = Tensor::zeros(&[t, t]);
            for i in 0..t {
                let wrow = &mut w.data_mut()[i * t..i * t + i + 1];
                for (j, wv) in wrow.iter_mut().enumerate() {
                    let mut dot = E::ZERO;
                    for d in 0..dh {
                        dot += q[i * dim + off + d] * k[j * dim + off + d];
                    }
                    *wv = dot * scale;
                }
                softmax_row(wrow);
                for (j, &wv) in wrow.iter().enumerate() {
                    for d in 0..dh {
                        out.data_mut()[i * dim + off + d] += wv * v[j * dim + off + d];
                    }
                }
            }
            weights.push(w);
        }
        Ok(self.push(
            out,
            Op::CausalAttention {
                query,
                key,
                value,
                heads,
                weights,
            },
        ))
    }

    /// Mean of `-log softmax(logits)[target]` over masked-in positions.
    pub fn masked_cross_entropy(&mut self, logits: NodeId, targets: &[u32], mask: &[bool]) -> Result<NodeId> {
        let vl = self.value(logits);
        let (t, vocab) = vl.dims2()?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::ShapeMismatch {
                op: "masked_cross_entropy",
                lhs: vec![t, vocab],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let n_masked = mask.iter().filter(|&&m| m).count();
        if n_masked == 0 {
            return Err(Error::EmptySupervision);
        }
        let mut idx = vec![0usize; t];
        for (pos, (&id, &m)) in targets.iter().zip(mask).enumerate() {
            if m {
                if (id as usize) >= vocab {
                    return Err(Error::TokenOutOfRange {
                        id,
                        size: vocab,
                    });
                }
                idx[pos] = id as usize;
            }
        }
        let mut probs = Tensor::zeros(&[t, vocab]);
        let mut total = E::ZERO;
        for pos in 0..t {
            if !mask[pos] {
                continue;
            }
            let row = &vl.data()[pos * vocab..(pos + 1) * vocab];
            let prow = &mut probs.data_mut()[pos * vocab..(pos + 1) * vocab];
            let mut mx = row[0];
            for &x in row {
                mx = mx.maximum(x);
            }
            let mut denom = E::ZERO;
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - mx).exp();
                denom += *p;
            }
            let inv = E::ONE / denom;
            for p in prow.iter_mut() {
                *p *= inv;
            }
            // -log p[target] computed in log space from the shifted logits
            total += denom.ln() - (row[idx[pos]] - mx);
        }
        let loss = total / E::from_f64(n_masked as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedCrossEntropy {
                logits,
                targets: idx,
                mask: mask.to_vec(),
                probs,
            },
        ))
    }

    /// Gradients of a scalar `root` with respect to every node, by a
    /// single reverse sweep over the tape. Leaves that do not influence
    /// the root get exact zeros.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<E>> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(E::ONE));
        for i in (0..=root.0).rev() {
            let Some(go) = grads[i].take() else { continue };
            self.accumulate(i, &go, &mut grads)?;
            grads[i] = Some(go);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, node: usize, go: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) -> Result<()> {
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(grads, *a, self.value(*a).shape(), go.data());
                add_into(grads, *b, self.value(*b).shape(), go.data());
            }
            Op::Mul(a, b) => {
                let da: Vec<E> = go.data().iter().zip(self.value(*b).data()).map(|(&g, &v)| g * v).collect();
                let db: Vec<E> = go.data().iter().zip(self.value(*a).data()).map(|(&g, &v)| g * v).collect();
                add_into(grads, *a, self.value(*a).shape(), &da);
                add_into(grads, *b, self.value(*b).shape(), &db);
            }
            Op::AddRow(a, b) => {
                add_into(grads, *a, self.value(*a).shape(), go.data());
                let cols = self.value(*b).numel();
                let mut db = vec![E::ZERO; cols];
                for (i, &g) in go.data().iter().enumerate() {
                    db[i % cols] += g;
                }
                add_into(grads, *b, self.value(*b).shape(), &db);
            }
            Op::Matmul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = va.dims2().expect("validated at construction");
                let n = vb.shape()[1];
                let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(va.shape()));
                linalg::matmul_acc_bt(go.data(), vb.data(), ga.data_mut(), m, k, n);
                let gb = grads[b.0].get_or_insert_with(|| Tensor::zeros(vb.shape()));
                linalg::matmul_acc_at(va.data(), go.data(), gb.data_mut(), m, k, n);
            }
            Op::Gelu(x) => {
                let dx: Vec<E> = go
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| g * gelu_bwd(v))
                    .collect();
                add_into(grads, *x, self.value(*x).shape(), &dx);
            }
            Op::Sum(x) => {
                let g = go.data()[0];
                let dx = vec![g; self.value(*x).numel()];
                add_into(grads, *x, self.value(*x).shape(), &dx);
            }
            Op::Softmax(x) => {
                // This node's own value holds the probabilities.
                let probs = &self.nodes[node].value;
                let (rows, cols) = probs.dims2().expect("validated at construction");
                let mut dx = vec![E::ZERO; rows * cols];
                for r in 0..rows {
                    let p = &probs.data()[r * cols..(r + 1) * cols];
                    let g = &go.data()[r * cols..(r + 1) * cols];
                    let mut dot = E::ZERO;
                    for (gv, pv) in g.iter().zip(p) {
                        dot += *gv * *pv;
                    }
                    for ((d, &gv), &pv) in dx[r * cols..(r + 1) * cols].iter_mut().zip(g).zip(p) {
                        *d = pv * (gv - dot);
                    }
                }
                add_into(grads, *x, self.value(*x).shape(), &dx);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let vx = self.value(*input);
                let (rows, cols) = vx.dims2().expect("validated at construction");
                let g = self.value(*gain).data();
                let inv_cols = E::ONE / E::from_f64(cols as f64);
                let mut dx = vec![E::ZERO; rows * cols];
                let mut dgain = vec![E::ZERO; cols];
                let mut dbias = vec![E::ZERO; cols];
                for r in 0..rows {
                    let x = &vx.data()[r * cols..(r + 1) * cols];
                    let gor = &go.data()[r * cols..(r + 1) * cols];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut m1 = E::ZERO;
                    let mut m2 = E::ZERO;
                    for j in 0..cols {
                        let xhat = (x[j] - mu) * rs;
                        let dxh = gor[j] * g[j];
                        m1 += dxh;
                        m2 += dxh * xhat;
                        dgain[j] += gor[j] * xhat;
                        dbias[j] += gor[j];
                    }
                    m1 *= inv_cols;
                    m2 *= inv_cols;
                    for j in 0..cols {
                        let xhat = (x[j] - mu) * rs;
                        dx[r * cols + j] = rs * (gor[j] * g[j] - m1 - xhat * m2);
                    }
                }
                add_into(grads, *input, vx.shape(), &dx);
                add_into(grads, *gain, &[cols], &dgain);
                add_into(grads, *bias, &[cols], &dbias);
            }
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let dim = vt.shape()[1];
                let gt = grads[table.0].get_or_insert_with(|| Tensor::zeros(vt.shape()));
                for (t, &i) in ids.iter().enumerate() {
                    let src = &go.data()[t * dim..(t + 1) * dim];
                    for (o, &g) in gt.data_mut()[i * dim..(i + 1) * dim].iter_mut().zip(src) {
                        *o += g;
                    }
                }
            }
            Op::CausalAttention {
                query,
                key,
                value,
                heads,
                weights,
            } => {
                let (t, dim) = self.value(*query).dims2().expect("validated at construction");
                let dh = dim / heads;
                let scale = E::from_f64(1.0 / (dh as f64).sqrt());
                let q = self.value(*query).data();
                let k = self.value(*key).data();
                let v = self.value(*value).data();
                let mut dq = vec![E::ZERO; t * dim];
                let mut dk = vec![E::ZERO; t * dim];
                let mut dv = vec![E::ZERO; t * dim];
                for h in 0..*heads {
                    let off = h * dh;
                    let w = weights[h].data();
                    for i in 0..t {
                        let go_row = &go.data()[i * dim + off..i * dim + off + dh];
                        // dw[i][j] = <go_i, v_j>; softmax backward within row i
                        let mut dw = vec![E::ZERO; i + 1];
                        let mut dot = E::ZERO;
                        for (j, dwj) in dw.iter_mut().enumerate() {
                            let mut acc = E::ZERO;
                            for d in 0..dh {
                                acc += go_row[d] * v[j * dim + off + d];
                            }
                            *dwj = acc;
                            dot += acc * w[i * t + j];
                        }
                        for (j, &dwj) in dw.iter().enumerate() {
                            let wij = w[i * t + j];
                            let ds = wij * (dwj - dot) * scale;
                            for d in 0..dh {
                                dq[i * dim + off + d] += ds * k[j * dim + off + d];
                                dk[j * dim + off + d] += ds * q[i * dim + off + d];
                                dv[j * dim + off + d] += wij * go_row[d];
                            }
                        }
                    }
                }
                add_into(grads, *query, &[t, dim], &dq);
                add_into(grads, *key, &[t, dim], &dk);
                add_into(grads, *value, &[t, dim], &dv);
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let (t, vocab) = probs.dims2().expect("validated at construction");
                let n_masked = mask.iter().filter(|&&m| m).count();
                let g = go.data()[0] / E::from_f64(n_masked as f64);
                let mut dl = vec![E::ZERO; t * vocab];
                for pos in 0..t {
                    if !mask[pos] {
                        continue;
                    }
                    let p = &probs.data()[pos * vocab..(pos + 1) * vocab];
                    let row = &mut dl[pos * vocab..(pos + 1) * vocab];
                    for (d, &pv) in row.iter_mut().zip(p) {
                        *d = g * pv;
                    }
                    row[targets[pos]] -= g;
                }
                add_into(grads, *logits, &[t, vocab], &dl);
            }
        }
        Ok(())
    }
}

fn add_into<E: Scalar>(grads: &mut [Option<Tensor<E>>], id: NodeId, shape: &[usize], delta: &[E]) {
    let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(shape));
    for (o, &d) in slot.data_mut().iter_mut().zip(delta) {
        *o += d;
    }
}

/// In-place numerically stable softmax of one row.
fn softmax_row<E: Scalar>(row: &mut [E]) {
    let mut mx = row[0];
    for &x in row.iter() {
        mx = mx.maximum(x);
    }
    let mut denom = E::ZERO;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        denom += *x;
    }
    let inv = E::ONE / denom;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

fn gelu_fwd<E: Scalar>(x: E) -> E {
    let c = E::from_f64(SQRT_2_OVER_PI);
    let a = E::from_f64(GELU_COEF);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::ONE + u.tanh())
}

fn gelu_bwd<E: Scalar>(x: E) -> E {
    let c = E::from_f64(SQRT_2_OVER_PI);
    let a = E::from_f64(GELU_COEF);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (E::ONE + three * a * x * x);
    half * (E::ONE + t) + half * x * (E::ONE - t * t) * du
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<E: Scalar> {
    grads: Vec<Option<Tensor<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Scalar> Gradients<E> {
    /// Gradient for `id`, exact zeros if the node did not influence the
    /// root.
    pub fn wrt(&self, id: NodeId) -> Tensor<E> {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    /// Like [`Gradients::wrt`] but without the clone; removes the slot.
    pub fn take(&mut self, id: NodeId) -> Tensor<E> {
        match self.grads[id.0].take() {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads[id.0].as_ref()
    }
}

/// Worst-offender report from a finite-difference check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest relative error over all input elements.
    pub worst: f64,
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error between an analytic and a central-difference gradient:
/// `|a-n| / max(|a|,|n|)`, with an absolute fallback when both magnitudes
/// are below 1e-8, and an infinite report when the analytic gradient is
/// exactly zero but the numeric one is not negligible.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let mag = analytic.abs().max(numeric.abs());
    if mag < 1e-8 {
        diff
    } else if analytic == 0.0 && numeric.abs() >= 1e-8 {
        f64::INFINITY
    } else {
        diff / mag
    }
}

/// Checks the analytic gradient of the scalar produced by `build`
/// against central differences with step `eps`, element by element over
/// every input tensor.
pub fn grad_check<E, F>(build: F, inputs: &[Tensor<E>], eps: f64) -> Result<GradCheck>
where
    E: Scalar,
    F: Fn(&mut Graph<E>, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let root = build(&mut graph, &ids)?;
    let grads = graph.backward(root)?;

    let eval = |perturbed: &[Tensor<E>]| -> Result<f64> {
        let mut g = Graph::new();
        let pids: Vec<NodeId> = perturbed.iter().map(|t| g.leaf(t.clone())).collect();
        let r = build(&mut g, &pids)?;
        Ok(g.value(r).item()?.to_f64())
    };

    let mut report = GradCheck {
        worst: 0.0,
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor<E>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(ids[i]);
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[i].data_mut()[e] = E::from_f64(orig.to_f64() + eps);
            let plus = eval(&work)?;
            work[i].data_mut()[e] = E::from_f64(orig.to_f64() - eps);
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[e].to_f64();
            let err = relative_error(a, numeric);
            if err > report.worst {
                report = GradCheck {
                    worst: err,
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn add_and_mul_gradients_check_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            let inputs = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])];
            let r = grad_check(
                |g, ids| {
                    let s = g.add(ids[0], ids[1])?;
                    let p = g.mul(s, ids[1])?;
                    Ok(g.sum(p))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(r.worst <= 1e-5, "worst {:?}", r);
        }
    }

    #[test]
    fn matmul_gradient_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let inputs = vec![rand_tensor(&mut rng, &[3, 5]), rand_tensor(&mut rng, &[5, 2])];
            let r = grad_check(
                |g, ids| {
                    let m = g.matmul(ids[0], ids[1])?;
                    Ok(g.sum(m))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(r.worst <= 1e-5, "worst {:?}", r);
        }
    }

    #[test]
    fn broadcast_row_gradient_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[3])];
        let r = grad_check(
            |g, ids| {
                let s = g.add_row(ids[0], ids[1])?;
                let sq = g.mul(s, s)?;
                Ok(g.sum(sq))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.worst <= 1e-5, "worst {:?}", r);
    }

    #[test]
    fn gelu_gradient_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![rand_tensor(&mut rng, &[2, 6])];
        let r = grad_check(
            |g, ids| {
                let y = g.gelu(ids[0]);
                Ok(g.sum(y))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.worst <= 1e-5, "worst {:?}", r);
    }

    #[test]
    fn softmax_gradient_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])];
        let r = grad_check(
            |g, ids| {
                let p = g.softmax(ids[0])?;
                let weighted = g.mul(p, ids[1])?;
                Ok(g.sum(weighted))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.worst <= 1e-5, "worst {:?}", r);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[5, 7]);
        let mut g = Graph::new();
        let id = g.leaf(x);
        let p = g.softmax(id).unwrap();
        for r in 0..5 {
            let s: f64 = g.value(p).data()[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_gradient_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 8]),
            rand_tensor(&mut rng, &[8]),
            rand_tensor(&mut rng, &[8]),
            rand_tensor(&mut rng, &[3, 8]),
        ];
        let r = grad_check(
            |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let w = g.mul(y, ids[3])?;
                Ok(g.sum(w))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.worst <= 1e-5, "worst {:?}", r);
    }

    #[test]
    fn embedding_gradient_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = vec![rand_tensor(&mut rng, &[6, 4]), rand_tensor(&mut rng, &[5, 4])];
        // id 2 repeats: its gradient rows must accumulate
        let ids = [2u32, 0, 5, 2, 1];
        let r = grad_check(
            |g, inp| {
                let e = g.embedding(inp[0], &ids)?;
                let w = g.mul(e, inp[1])?;
                Ok(g.sum(w))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.worst <= 1e-5, "worst {:?}", r);
    }

    #[test]
    fn causal_attention_gradient_checks_out() {
        // ε balances truncation against roundoff: attention is a deep
        // composite whose smallest true gradients sit near 1e-6, so the
        // spacing must keep the difference quotient above the f64 noise
        // floor (ulp/2ε) while staying in the linear regime.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..4 {
            let inputs = vec![
                rand_tensor(&mut rng, &[4, 6]),
                rand_tensor(&mut rng, &[4, 6]),
                rand_tensor(&mut rng, &[4, 6]),
                rand_tensor(&mut rng, &[4, 6]),
            ];
            let r = grad_check(
                |g, ids| {
                    let o = g.causal_attention(ids[0], ids[1], ids[2], 2)?;
                    let w = g.mul(o, ids[3])?;
                    Ok(g.sum(w))
                },
                &inputs,
                1e-4,
            )
            .unwrap();
            assert!(r.worst <= 1e-5, "worst {:?}", r);
        }
    }

    #[test]
    fn attention_is_causal() {
        // Changing a later value row must not change earlier outputs.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = rand_tensor(&mut rng, &[4, 6]);
        let k = rand_tensor(&mut rng, &[4, 6]);
        let v = rand_tensor(&mut rng, &[4, 6]);
        let run = |vv: &Tensor<f64>| {
            let mut g = Graph::new();
            let (qi, ki, vi) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(vv.clone()));
            let o = g.causal_attention(qi, ki, vi, 2).unwrap();
            g.value(o).data().to_vec()
        };
        let base = run(&v);
        let mut v2 = v.clone();
        for d in 0..6 {
            v2.data_mut()[3 * 6 + d] += 10.0;
        }
        let bumped = run(&v2);
        assert_eq!(&base[..3 * 6], &bumped[..3 * 6]);
        assert_ne!(&base[3 * 6..], &bumped[3 * 6..]);
    }

    #[test]
    fn masked_cross_entropy_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = rand_tensor(&mut rng, &[4, 5]);
        let targets = [1u32, 4, 0, 2];
        let mask = [false, true, true, true];
        let mut g = Graph::new();
        let l = g.leaf(logits.clone());
        let loss = g.masked_cross_entropy(l, &targets, &mask).unwrap();
        // direct per-position computation, no shared code with the op
        let mut want = 0.0;
        let mut n = 0;
        for pos in 0..4 {
            if !mask[pos] {
                continue;
            }
            let row = &logits.data()[pos * 5..(pos + 1) * 5];
            let denom: f64 = row.iter().map(|x| x.exp()).sum();
            want += -(row[targets[pos] as usize].exp() / denom).ln();
            n += 1;
        }
        want /= n as f64;
        let got = g.value(loss).item().unwrap();
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn masked_cross_entropy_gradient_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inputs = vec![rand_tensor(&mut rng, &[4, 5])];
        let targets = [1u32, 4, 0, 2];
        let mask = [true, false, true, true];
        let r = grad_check(
            |g, ids| g.masked_cross_entropy(ids[0], &targets, &mask),
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.worst <= 1e-5, "worst {:?}", r);
    }

    #[test]
    fn masked_cross_entropy_is_count_weighted_linear_over_disjoint_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let logits = rand_tensor(&mut rng, &[6, 5]);
        let targets = [1u32, 4, 0, 2, 3, 1];
        let m1 = [true, false, true, false, false, false];
        let m2 = [false, true, false, false, true, true];
        let union: Vec<bool> = m1.iter().zip(&m2).map(|(a, b)| a | b).collect();
        let eval = |mask: &[bool]| {
            let mut g = Graph::new();
            let l = g.leaf(logits.clone());
            let loss = g.masked_cross_entropy(l, &targets, mask).unwrap();
            g.value(loss).item().unwrap()
        };
        let (l1, l2, lu) = (eval(&m1), eval(&m2), eval(&union));
        assert!((lu * 5.0 - (l1 * 2.0 + l2 * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        let mut g = Graph::new();
        let l = g.leaf(logits);
        let err = g.masked_cross_entropy(l, &[0, 1], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::EmptySupervision));
    }

    #[test]
    fn masked_target_out_of_range_is_rejected_only_when_masked_in() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        let mut g = Graph::new();
        let l = g.leaf(logits);
        let err = g.masked_cross_entropy(l, &[0, 7], &[true, true]).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { id: 7, size: 3 }));
        // a masked-out position may carry any id
        let ok = g.masked_cross_entropy(l, &[0, 7], &[true, false]);
        assert!(ok.is_ok());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarRoot(s) if s == vec![2, 2]));
    }

    #[test]
    fn unused_leaf_gets_exact_zeros() {
        let mut g: Graph<f64> = Graph::new();
        let used = g.leaf(Tensor::scalar(2.0));
        let unused = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = g.mul(used, used).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0]);
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(used).data(), &[4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn rebuilt_graph_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let q = rand_tensor(&mut rng, &[5, 8]);
        let k = rand_tensor(&mut rng, &[5, 8]);
        let v = rand_tensor(&mut rng, &[5, 8]);
        let run = || {
            let mut g = Graph::new();
            let (qi, ki, vi) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
            let o = g.causal_attention(qi, ki, vi, 4).unwrap();
            let ge = g.gelu(o);
            let s = g.sum(ge);
            let grads = g.backward(s).unwrap();
            (
                g.value(s).item().unwrap().to_bits(),
                grads.wrt(qi).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn relative_error_follows_the_reporting_rules() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
        // both tiny: absolute fallback
        assert!(relative_error(1e-12, 3e-12) < 1e-8);
        // analytic exactly zero, numeric not negligible
        assert_eq!(relative_error(0.0, 1e-3), f64::INFINITY);
    }
}
