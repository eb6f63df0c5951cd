//! Tape-based reverse-mode differentiation over 2-D row-major values.
//!
//! A [`Graph`] records every operation eagerly. Parameters enter the tape as
//! borrowed leaves; a leaf requires gradient exactly when its tensor is
//! trainable, and only nodes downstream of such leaves are differentiated.
//! [`Graph::backward`] walks the tape once in reverse and returns the
//! gradients of all trainable leaves keyed by [`TensorId`].

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kv_cache::KvEntry;
use crate::tensor::{Parameters, Scalar, Tensor, TensorId};

pub const RMS_EPS: f64 = 1e-8;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How the rows of an attention input are grouped into sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq: usize,
    /// Absolute position of the first row of every sequence.
    pub pos_offset: usize,
}

impl SeqLayout {
    pub fn single(seq: usize, pos_offset: usize) -> Self {
        SeqLayout {
            batch: 1,
            seq,
            pos_offset,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

#[derive(Debug)]
struct AttnSaved<S> {
    q: Var,
    k: Var,
    v: Var,
    layout: SeqLayout,
    heads: usize,
    past: usize,
    /// Rotated queries `[B*T x d]`.
    q_rot: Vec<S>,
    /// Rotated keys per sequence `[B x (past+T) x d]`.
    keys: Vec<S>,
    /// Values per sequence `[B x (past+T) x d]`.
    values: Vec<S>,
    /// Softmax weights `[B x H x T x (past+T)]`.
    probs: Vec<S>,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, S),
    Silu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<S>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    Attention(Box<AttnSaved<S>>),
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    Sum(Var),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulBroadcast(..) => "mul_broadcast",
            Op::Scale(..) => "scale",
            Op::Silu(..) => "silu",
            Op::Softmax(..) => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Embedding { .. } => "embedding",
            Op::Concat(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Transpose(..) => "transpose",
            Op::Attention(..) => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, [S]>,
    rows: usize,
    cols: usize,
    op: Op<S>,
    requires_grad: bool,
    param: Option<TensorId>,
}

/// Gradients of trainable leaves produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<S> {
    by_id: HashMap<TensorId, Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: TensorId) -> Option<&[S]> {
        self.by_id.get(&id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Adds every gradient into the matching tensor's gradient slot.
    pub fn accumulate_into<P: Parameters<S> + ?Sized>(&self, params: &mut P) -> Result<()> {
        let mut res = Ok(());
        params.visit_mut(&mut |name, t| {
            if res.is_err() {
                return;
            }
            if let Some(g) = self.by_id.get(&t.id()) {
                res = t.accumulate_grad(name, g);
            }
        });
        res
    }
}

pub struct Graph<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
}

impl<'a, S: Scalar> Default for Graph<'a, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let (r, c) = self.shape(v);
        Tensor::from_vec(&[r, c], self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// Ids of every parameter tensor that entered this graph.
    pub fn leaf_ids(&self) -> Vec<TensorId> {
        self.nodes.iter().filter_map(|n| n.param).collect()
    }

    /// Names of the operations recorded so far, in tape order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Cow<'a, [S]>, rows: usize, cols: usize, op: Op<S>, rg: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad: rg,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a parameter tensor as a leaf viewed as `rows() x cols()`.
    pub fn param(&mut self, t: &'a Tensor<S>) -> Var {
        let v = self.push(
            Cow::Borrowed(t.data()),
            t.rows(),
            t.cols(),
            Op::Leaf,
            t.trainable(),
        );
        self.nodes[v.0].param = Some(t.id());
        v
    }

    /// A constant leaf that never requires gradient.
    pub fn constant(&mut self, data: Vec<S>, rows: usize, cols: usize) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::shape("constant", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(Cow::Owned(data), rows, cols, Op::Leaf, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, S::zero());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), m, n, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::shape(op, &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), r, c, Op::Add(a, b), rg))
    }

    /// `a + bias` with a `1 x cols` bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br * bc != c {
            return Err(Error::shape("add_row", &[r, c], &[br, bc]));
        }
        let bv = self.value(bias);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Cow::Owned(out), r, c, Op::AddRow(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), r, c, Op::Mul(a, b), rg))
    }

    /// `a * g` where `g` holds either one scalar or one value per column.
    pub fn mul_broadcast(&mut self, a: Var, g: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (gr, gc) = self.shape(g);
        let glen = gr * gc;
        if glen != 1 && glen != c {
            return Err(Error::shape("mul_broadcast", &[r, c], &[gr, gc]));
        }
        let gv = self.value(g);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * gv[if glen == 1 { 0 } else { i % c }])
            .collect();
        let rg = self.rg(a) || self.rg(g);
        Ok(self.push(Cow::Owned(out), r, c, Op::MulBroadcast(a, g), rg))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), r, c, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), r, c, Op::Silu(a), rg)
    }

    /// Max-stabilized softmax along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => {}
            0 => {
                let t = self.transpose(x);
                let s = self.softmax(t, 1)?;
                return Ok(self.transpose(s));
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "softmax axis {axis} invalid for a 2-D value"
                )))
            }
        }
        let (r, c) = self.shape(x);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).chunks(c) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - max).exp()));
            let z: S = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|v| *v = *v / z);
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), r, c, Op::Softmax(x), rg))
    }

    /// Scales each row to unit root-mean-square, then multiplies by `w`.
    pub fn rms_norm(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let (wr, wc) = self.shape(w);
        if wr * wc != c {
            return Err(Error::shape("rms_norm", &[r, c], &[wr, wc]));
        }
        if c == 0 {
            return Err(Error::InvalidArgument(
                "rms_norm over a zero-length dimension".into(),
            ));
        }
        let eps = S::from_f64(RMS_EPS);
        let n = S::from_f64(c as f64);
        let xv = self.value(x);
        let wv = self.value(w);
        let mut inv_rms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.chunks(c) {
            let ms = row.iter().map(|&v| v * v).sum::<S>() / n;
            let inv = (ms + eps).sqrt().recip();
            inv_rms.push(inv);
            out.extend(row.iter().zip(wv).map(|(&v, &wj)| v * inv * wj));
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Cow::Owned(out), r, c, Op::RmsNorm { x, w, inv_rms }, rg))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocabulary of {v}"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Cow::Owned(out),
            ids.len(),
            d,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let c = self.shape(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(Error::shape("concat_rows", &[rows, c], &[pr, pc]));
            }
            rows += pr;
            out.extend_from_slice(self.value(p));
            rg |= self.rg(p);
        }
        Ok(self.push(Cow::Owned(out), rows, c, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(Error::shape("slice_rows", &[r, c], &[start, len]));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), len, c, Op::SliceRows { x, start }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push(Cow::Owned(out), c, r, Op::Transpose(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Cow::Owned(vec![s]), 1, 1, Op::Sum(x), rg)
    }

    /// Causal multi-head self-attention with rotary position encoding.
    ///
    /// `q`, `k`, `v` are `[batch*seq x d]`. With a cache entry, the stored
    /// keys/values are attended as a prefix and the new rotated keys/values
    /// are appended; cached positions are constants for differentiation.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
        cache: Option<&mut KvEntry<S>>,
    ) -> Result<Var> {
        let (r, d) = self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        if r != layout.rows() {
            return Err(Error::shape("attention layout", &[r, d], &[layout.batch, layout.seq]));
        }
        if heads == 0 || d % heads != 0 || !(d / heads).is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "width {d} not divisible into {heads} even-width heads"
            )));
        }
        let past = cache.as_ref().map_or(0, |c| c.len());
        if let Some(c) = cache.as_ref() {
            if layout.batch != 1 {
                return Err(Error::InvalidArgument("cached attention needs batch 1".into()));
            }
            if layout.pos_offset != past {
                return Err(Error::InvalidArgument(format!(
                    "cache holds {past} positions but input starts at {}",
                    layout.pos_offset
                )));
            }
            if c.width() != d {
                return Err(Error::shape("kv cache width", &[d], &[c.width()]));
            }
        }
        let hd = d / heads;
        let t_len = layout.seq;
        let kl = past + t_len;
        let rope = RopeTable::<S>::new(layout.pos_offset, t_len, hd);

        let mut q_rot = self.value(q).to_vec();
        let mut k_rot = self.value(k).to_vec();
        for row in 0..r {
            let t = row % t_len;
            for h in 0..heads {
                let off = row * d + h * hd;
                rope.rotate(&mut q_rot[off..off + hd], t, false);
                rope.rotate(&mut k_rot[off..off + hd], t, false);
            }
        }

        let vv = self.value(v);
        let mut keys = Vec::with_capacity(layout.batch * kl * d);
        let mut values = Vec::with_capacity(layout.batch * kl * d);
        if let Some(c) = &cache {
            keys.extend_from_slice(&c.keys);
            values.extend_from_slice(&c.values);
            keys.extend_from_slice(&k_rot);
            values.extend_from_slice(vv);
        } else {
            keys = k_rot.clone();
            values = vv.to_vec();
        }

        let scale = S::from_f64(1.0 / (hd as f64).sqrt());
        let mut probs = vec![S::zero(); layout.batch * heads * t_len * kl];
        let mut out = vec![S::zero(); r * d];
        for b in 0..layout.batch {
            for h in 0..heads {
                for t in 0..t_len {
                    let qoff = (b * t_len + t) * d + h * hd;
                    let qrow = &q_rot[qoff..qoff + hd];
                    let visible = past + t + 1;
                    let poff = ((b * heads + h) * t_len + t) * kl;
                    let prow = &mut probs[poff..poff + kl];
                    let mut max = S::neg_infinity();
                    for j in 0..visible {
                        let koff = (b * kl + j) * d + h * hd;
                        let s = dot(qrow, &keys[koff..koff + hd]) * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    let mut z = S::zero();
                    for p in prow[..visible].iter_mut() {
                        *p = (*p - max).exp();
                        z += *p;
                    }
                    let orow = &mut out[qoff..qoff + hd];
                    for j in 0..visible {
                        prow[j] = prow[j] / z;
                        let voff = (b * kl + j) * d + h * hd;
                        axpy(prow[j], &values[voff..voff + hd], orow);
                    }
                }
            }
        }

        if let Some(c) = cache {
            c.append(&k_rot, vv)?;
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let saved = AttnSaved {
            q,
            k,
            v,
            layout,
            heads,
            past,
            q_rot,
            keys,
            values,
            probs,
        };
        Ok(self.push(Cow::Owned(out), r, d, Op::Attention(Box::new(saved)), rg))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (r, vocab) = self.shape(logits);
        if targets.len() != r || mask.len() != r {
            return Err(Error::shape("cross_entropy", &[r, vocab], &[targets.len(), mask.len()]));
        }
        let rows: Vec<usize> = (0..r).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::InvalidArgument(
                "cross_entropy with every position masked out".into(),
            ));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(rows.len() * vocab);
        let mut total = 0.0f64;
        let mut kept = Vec::with_capacity(rows.len());
        for &i in &rows {
            let tgt = targets[i];
            if tgt >= vocab {
                return Err(Error::InvalidArgument(format!(
                    "target id {tgt} out of range for vocabulary of {vocab}"
                )));
            }
            kept.push(tgt);
            let row = &lv[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += (lse - row[tgt]).as_f64();
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let loss = S::from_f64(total / rows.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            1,
            1,
            Op::CrossEntropy {
                logits,
                rows,
                targets: kept,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(Error::NonScalarLoss(vec![r, c]));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Some(id) = node.param {
                // a tensor registered more than once sums its leaf gradients
                match out.by_id.entry(id) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        e.get_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(g);
                    }
                }
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node<'a, S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let cols = node.cols;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if self.rg(*a) {
                    let buf = grad_buf(grads, *a, m * k);
                    S::gemm(m, n, k, g, false, self.value(*b), true, buf, S::one());
                }
                if self.rg(*b) {
                    let buf = grad_buf(grads, *b, k * n);
                    S::gemm(k, m, n, self.value(*a), true, g, false, buf, S::one());
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.rg(x) {
                        add_into(grad_buf(grads, x, g.len()), g);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.rg(*a) {
                    add_into(grad_buf(grads, *a, g.len()), g);
                }
                if self.rg(*bias) {
                    let buf = grad_buf(grads, *bias, cols);
                    for row in g.chunks(cols) {
                        add_into(buf, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let buf = grad_buf(grads, *a, g.len());
                    buf.iter_mut().zip(g.iter().zip(bv)).for_each(|(o, (&gi, &y))| *o += gi * y);
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let buf = grad_buf(grads, *b, g.len());
                    buf.iter_mut().zip(g.iter().zip(av)).for_each(|(o, (&gi, &x))| *o += gi * x);
                }
            }
            Op::MulBroadcast(a, gate) => {
                let gv = self.value(*gate);
                let glen = gv.len();
                let idx = |i: usize| if glen == 1 { 0 } else { i % cols };
                if self.rg(*a) {
                    let buf = grad_buf(grads, *a, g.len());
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += g[i] * gv[idx(i)];
                    }
                }
                if self.rg(*gate) {
                    let av = self.value(*a);
                    let buf = grad_buf(grads, *gate, glen);
                    for i in 0..g.len() {
                        buf[idx(i)] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    let buf = grad_buf(grads, *a, g.len());
                    buf.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi * *s);
                }
            }
            Op::Silu(a) => {
                if self.rg(*a) {
                    let av = self.value(*a);
                    let buf = grad_buf(grads, *a, g.len());
                    for i in 0..g.len() {
                        let x = av[i];
                        let sg = sigmoid(x);
                        buf[i] += g[i] * sg * (S::one() + x * (S::one() - sg));
                    }
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let y = &node.value;
                    let buf = grad_buf(grads, *x, g.len());
                    for (row, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let inner: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            buf[row * cols + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = S::from_f64(cols as f64);
                if self.rg(*x) {
                    let buf = grad_buf(grads, *x, g.len());
                    for (row, &inv) in inv_rms.iter().enumerate() {
                        let span = row * cols..(row + 1) * cols;
                        let xr = &xv[span.clone()];
                        let gr = &g[span.clone()];
                        let dot: S = (0..cols).map(|j| xr[j] * wv[j] * gr[j]).sum();
                        let coef = inv * inv * inv * dot / n;
                        let br = &mut buf[span];
                        for j in 0..cols {
                            br[j] += inv * wv[j] * gr[j] - coef * xr[j];
                        }
                    }
                }
                if self.rg(*w) {
                    let buf = grad_buf(grads, *w, cols);
                    for (row, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..cols {
                            buf[j] += g[row * cols + j] * xv[row * cols + j] * inv;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let (v, d) = self.shape(*table);
                    let buf = grad_buf(grads, *table, v * d);
                    for (row, &i) in ids.iter().enumerate() {
                        add_into(&mut buf[i * d..(i + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        add_into(grad_buf(grads, p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                if self.rg(*x) {
                    let len = self.value(*x).len();
                    let buf = grad_buf(grads, *x, len);
                    add_into(&mut buf[start * cols..start * cols + g.len()], g);
                }
            }
            Op::Transpose(x) => {
                if self.rg(*x) {
                    let (r, c) = self.shape(*x);
                    let buf = grad_buf(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let len = self.value(*x).len();
                    let buf = grad_buf(grads, *x, len);
                    buf.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                if self.rg(*logits) {
                    let (r, vocab) = self.shape(*logits);
                    let buf = grad_buf(grads, *logits, r * vocab);
                    let coef = g[0] / S::from_f64(rows.len() as f64);
                    for (slot, (&row, &tgt)) in rows.iter().zip(targets).enumerate() {
                        let p = &probs[slot * vocab..(slot + 1) * vocab];
                        let br = &mut buf[row * vocab..(row + 1) * vocab];
                        for j in 0..vocab {
                            br[j] += coef * p[j];
                        }
                        br[tgt] = br[tgt] - coef;
                    }
                }
            }
            Op::Attention(saved) => self.backprop_attention(saved, g, grads),
        }
    }

    fn backprop_attention(&self, s: &AttnSaved<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let d = self.shape(s.q).1;
        let hd = d / s.heads;
        let t_len = s.layout.seq;
        let kl = s.past + t_len;
        let rows = s.layout.rows();
        let scale = S::from_f64(1.0 / (hd as f64).sqrt());
        let rope = RopeTable::<S>::new(s.layout.pos_offset, t_len, hd);

        let mut dq = vec![S::zero(); rows * d];
        let mut dkeys = vec![S::zero(); s.layout.batch * kl * d];
        let mut dvalues = vec![S::zero(); s.layout.batch * kl * d];
        let mut dp = vec![S::zero(); kl];
        for b in 0..s.layout.batch {
            for h in 0..s.heads {
                for t in 0..t_len {
                    let qoff = (b * t_len + t) * d + h * hd;
                    let grow = &g[qoff..qoff + hd];
                    let visible = s.past + t + 1;
                    let poff = ((b * s.heads + h) * t_len + t) * kl;
                    let prow = &s.probs[poff..poff + kl];
                    let mut weighted = S::zero();
                    for j in 0..visible {
                        let voff = (b * kl + j) * d + h * hd;
                        axpy(prow[j], grow, &mut dvalues[voff..voff + hd]);
                        dp[j] = dot(grow, &s.values[voff..voff + hd]);
                        weighted += prow[j] * dp[j];
                    }
                    for j in 0..visible {
                        let ds = prow[j] * (dp[j] - weighted) * scale;
                        let koff = (b * kl + j) * d + h * hd;
                        axpy(ds, &s.keys[koff..koff + hd], &mut dq[qoff..qoff + hd]);
                        axpy(ds, &s.q_rot[qoff..qoff + hd], &mut dkeys[koff..koff + hd]);
                    }
                }
            }
        }

        // Only the freshly computed positions flow back into k and v.
        let mut dk = vec![S::zero(); rows * d];
        let mut dv = vec![S::zero(); rows * d];
        for b in 0..s.layout.batch {
            for t in 0..t_len {
                let src = (b * kl + s.past + t) * d;
                let dst = (b * t_len + t) * d;
                dk[dst..dst + d].copy_from_slice(&dkeys[src..src + d]);
                dv[dst..dst + d].copy_from_slice(&dvalues[src..src + d]);
            }
        }
        for row in 0..rows {
            let t = row % t_len;
            for h in 0..s.heads {
                let off = row * d + h * hd;
                rope.rotate(&mut dq[off..off + hd], t, true);
                rope.rotate(&mut dk[off..off + hd], t, true);
            }
        }
        for (var, buf) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
            if self.rg(var) {
                add_into(grad_buf(grads, var, rows * d), &buf);
            }
        }
    }
}

fn grad_buf<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    y.iter_mut().zip(x).for_each(|(o, &v)| *o += alpha * v);
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Rotation angles for positions `offset..offset+len` of one head.
struct RopeTable<S> {
    cos: Vec<S>,
    sin: Vec<S>,
    half: usize,
}

impl<S: Scalar> RopeTable<S> {
    fn new(offset: usize, len: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for t in 0..len {
            let pos = (offset + t) as f64;
            for i in 0..half {
                let freq = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
                let (s, c) = (pos * freq).sin_cos();
                cos.push(S::from_f64(c));
                sin.push(S::from_f64(s));
            }
        }
        RopeTable { cos, sin, half }
    }

    /// Rotates consecutive pairs of `x` for local position `t`; `inverse`
    /// applies the transpose rotation.
    fn rotate(&self, x: &mut [S], t: usize, inverse: bool) {
        for i in 0..self.half {
            let c = self.cos[t * self.half + i];
            let s = if inverse {
                -self.sin[t * self.half + i]
            } else {
                self.sin[t * self.half + i]
            };
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            x[2 * i] = a * c - b * s;
            x[2 * i + 1] = a * s + b * c;
        }
    }
}
