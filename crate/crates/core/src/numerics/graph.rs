//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves either borrow a
//! parameter (`'p` ties the graph to the components it reads) or own a
//! constant. A node requires a gradient when any of its inputs does, so
//! gradients flow through frozen operations to trainable leaves upstream
//! without ever accumulating into frozen parameters.

use std::borrow::Cow;

use indexmap::IndexMap;

use super::kernels::{self, ovr_sign};
use crate::error::{shape_err, Error, Result};
use crate::params::Param;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Linear { x: usize, w: usize, b: Option<usize> },
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddPositional { x: usize, pos: usize },
    Scale { x: usize, c: f64 },
    Mul { a: usize, b: usize },
    Relu { x: usize },
    Gelu { x: usize },
    LayerNorm { x: usize, gain: usize, shift: usize, xhat: Tensor, inv_std: Vec<f64> },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<f64> },
    Reshape { x: usize },
    MeanTokens { x: usize },
    ChannelMix { x: usize, w: usize, b: usize },
    Windows { x: usize, window: usize, stride: usize },
    Softmax { x: usize },
    Sum { x: usize },
    Mse { pred: usize, target: Tensor },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Tensor },
    Hinge { scores: usize, labels: Vec<usize>, margin: f64 },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. See the module docs.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    keys: Vec<(String, usize)>,
    record: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph that records operations for [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            keys: Vec::new(),
            record: true,
        }
    }

    /// A graph that never records backward information.
    pub fn inference() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Moves a node's value out of the graph (cloning if it is borrowed).
    pub fn into_value(mut self, v: Var) -> Tensor {
        let node = self.nodes.swap_remove(v.0);
        node.value.into_owned()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Owned constant; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Borrowed constant input.
    pub fn input(&mut self, value: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// Borrows a parameter. It receives a gradient under `key` when
    /// `trainable` is set, the parameter is not frozen and the graph records.
    pub fn param(&mut self, key: impl FnOnce() -> String, p: &'p Param, trainable: bool) -> Var {
        let rg = trainable && !p.frozen && self.record;
        let v = self.push(Cow::Borrowed(&p.value), Op::Leaf, rg);
        if rg {
            self.keys.push((key(), v.0));
        }
        v
    }

    /// Owned leaf that receives a gradient under `key`.
    pub fn variable(&mut self, key: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(Cow::Owned(value), Op::Leaf, true);
        if self.record {
            self.keys.push((key.into(), v.0));
        }
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(
            Cow::Owned(y),
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Cow::Owned(y), Op::MatMul { a: a.0, b: b.0 }, rg))
    }

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("{what}: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Cow::Owned(y), Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Cow::Owned(y), Op::Mul { a: a.0, b: b.0 }, rg))
    }

    /// Adds rows `0..T` of `pos: [T_max, E]` to every `[T, E]` block of `x`.
    pub fn add_positional(&mut self, x: Var, pos: Var) -> Result<Var> {
        let (tx, tp) = (self.value(x), self.value(pos));
        let r = tx.rank();
        if r < 2 || tp.rank() != 2 || tp.shape()[1] != tx.shape()[r - 1] || tp.shape()[0] < tx.shape()[r - 2] {
            return shape_err(format!(
                "positional table {:?} cannot cover input {:?}",
                tp.shape(),
                tx.shape()
            ));
        }
        let block = tx.shape()[r - 2] * tx.shape()[r - 1];
        let mut y = tx.clone();
        for chunk in y.data_mut().chunks_mut(block) {
            for (o, p) in chunk.iter_mut().zip(tp.data()) {
                *o += p;
            }
        }
        let rg = self.rg(&[x.0, pos.0]);
        Ok(self.push(Cow::Owned(y), Op::AddPositional { x: x.0, pos: pos.0 }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x.0]);
        self.push(Cow::Owned(y), Op::Scale { x: x.0, c }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x.0]);
        self.push(Cow::Owned(y), Op::Relu { x: x.0 }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(kernels::gelu);
        let rg = self.rg(&[x.0]);
        self.push(Cow::Owned(y), Op::Gelu { x: x.0 }, rg)
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (y, stats) =
            kernels::layernorm_full(self.value(x), self.value(gain), self.value(shift), eps)?;
        let rg = self.rg(&[x.0, gain.0, shift.0]);
        Ok(self.push(
            Cow::Owned(y),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                shift: shift.0,
                xhat: stats.xhat,
                inv_std: stats.inv_std,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention over axis -2.
    ///
    /// `q`, `k` and `v` share the shape `[.., T, E]`; every leading index is an
    /// independent sequence. `E` must be divisible by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.rank() < 2 {
            return shape_err(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            ));
        }
        let r = tq.rank();
        let (t, e) = (tq.shape()[r - 2], tq.shape()[r - 1]);
        if heads == 0 || e % heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {e} not divisible by {heads} heads"
            )));
        }
        let dh = e / heads;
        let n = tq.len() / (t * e);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![0.0; tq.len()];
        let mut probs = vec![0.0; n * heads * t * t];
        for s in 0..n {
            let base = s * t * e;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let prow = &mut probs[((s * heads + h) * t + i) * t..][..t];
                    let qi = &qd[base + i * e + off..][..dh];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kd[base + j * e + off..][..dh];
                        *pj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    kernels::softmax_in_place(prow);
                    let orow = &mut out[base + i * e + off..][..dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vd[base + j * e + off..][..dh];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let y = Tensor::new(tq.shape(), out)?;
        let rg = self.rg(&[q.0, k.0, v.0]);
        Ok(self.push(
            Cow::Owned(y),
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Cow::Owned(y), Op::Reshape { x: x.0 }, rg))
    }

    /// Mean over axis -2: `[.., T, E] → [.., E]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let r = tx.rank();
        if r < 2 {
            return shape_err(format!("mean_tokens needs rank ≥ 2, got {:?}", tx.shape()));
        }
        let (t, e) = (tx.shape()[r - 2], tx.shape()[r - 1]);
        let groups = tx.len() / (t * e).max(1);
        let mut out = vec![0.0; groups * e];
        for g in 0..groups {
            let o = &mut out[g * e..(g + 1) * e];
            for tok in 0..t {
                for (oj, xj) in o.iter_mut().zip(&tx.data()[(g * t + tok) * e..][..e]) {
                    *oj += xj;
                }
            }
            for oj in o.iter_mut() {
                *oj /= t as f64;
            }
        }
        let mut shape = tx.shape()[..r - 2].to_vec();
        shape.push(e);
        let y = Tensor::new(shape, out)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Cow::Owned(y), Op::MeanTokens { x: x.0 }, rg))
    }

    /// `out[b, c', l] = Σ_c w[c', c]·x[b, c, l] + bias[c']`.
    pub fn channel_mix(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 3 || tw.rank() != 2 || tw.shape()[1] != tx.shape()[1] || tb.shape() != [tw.shape()[0]] {
            return shape_err(format!(
                "channel mix: input {:?}, weight {:?}, bias {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            ));
        }
        let (bsz, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let cout = tw.shape()[0];
        let mut out = vec![0.0; bsz * cout * len];
        for bi in 0..bsz {
            for co in 0..cout {
                let o = &mut out[(bi * cout + co) * len..][..len];
                for ci in 0..cin {
                    let wv = tw.data()[co * cin + ci];
                    for (ov, xv) in o.iter_mut().zip(&tx.data()[(bi * cin + ci) * len..][..len]) {
                        *ov += wv * xv;
                    }
                }
                let bv = tb.data()[co];
                for ov in o.iter_mut() {
                    *ov += bv;
                }
            }
        }
        let y = Tensor::new([bsz, cout, len], out)?;
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(Cow::Owned(y), Op::ChannelMix { x: x.0, w: w.0, b: b.0 }, rg))
    }

    /// Sliding windows: `[B, C, L] → [B·n, C, window]`, item-major.
    pub fn windows(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return shape_err(format!("windows needs [B, C, L], got {:?}", tx.shape()));
        }
        let (bsz, c, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if window == 0 || stride == 0 || window > len {
            return Err(Error::Config(format!(
                "window {window} with stride {stride} does not fit length {len}"
            )));
        }
        let n = (len - window) / stride + 1;
        let mut out = Vec::with_capacity(bsz * n * c * window);
        for b in 0..bsz {
            for j in 0..n {
                for ch in 0..c {
                    let start = (b * c + ch) * len + j * stride;
                    out.extend_from_slice(&tx.data()[start..start + window]);
                }
            }
        }
        let y = Tensor::new([bsz * n, c, window], out)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Cow::Owned(y), Op::Windows { x: x.0, window, stride }, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = kernels::softmax(self.value(x));
        let rg = self.rg(&[x.0]);
        self.push(Cow::Owned(y), Op::Softmax { x: x.0 }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x.0]);
        self.push(Cow::Owned(y), Op::Sum { x: x.0 }, rg)
    }

    pub fn mse(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let l = kernels::mse(self.value(pred), &target)?;
        let rg = self.rg(&[pred.0]);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(l)),
            Op::Mse { pred: pred.0, target },
            rg,
        ))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = kernels::cross_entropy(self.value(logits), labels)?;
        let probs = if self.record {
            kernels::softmax(self.value(logits))
        } else {
            Tensor::zeros([0])
        };
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(l)),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn hinge(&mut self, scores: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let l = kernels::hinge(self.value(scores), labels, margin)?;
        let rg = self.rg(&[scores.0]);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(l)),
            Op::Hinge {
                scores: scores.0,
                labels: labels.to_vec(),
                margin,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::State("backward on an inference graph".into()));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return shape_err(format!("backward needs a scalar loss, got {:?}", lv.shape()));
        }
        if !lv.all_finite() {
            return Err(Error::Numerical(format!("non-finite loss {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            keys: self
                .keys
                .iter()
                .map(|(k, i)| (k.clone(), grads[*i].take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[*i].value.shape()))))
                .collect(),
        })
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
        if !self.wants(i) {
            return;
        }
        match &mut grads[i] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (n, k) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.rows();
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * k];
                    kernels::matmul_into(dy.data(), tw.data(), &mut dx, rows, n, k);
                    self.accumulate(grads, *x, Tensor::new(tx.shape(), dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; n * k];
                    let (dd, xd) = (dy.data(), tx.data());
                    for r in 0..rows {
                        let xr = &xd[r * k..(r + 1) * k];
                        for j in 0..n {
                            let g = dd[r * n + j];
                            if g != 0.0 {
                                for (o, xv) in dw[j * k..(j + 1) * k].iter_mut().zip(xr) {
                                    *o += g * xv;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new([n, k], dw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; n];
                        for row in dy.data().chunks(n) {
                            for (o, g) in db.iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new([n], db)?);
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let bt = kernels::transpose(tb)?;
                    self.accumulate(grads, *a, kernels::matmul(dy, &bt)?);
                }
                if self.wants(*b) {
                    let at = kernels::transpose(ta)?;
                    self.accumulate(grads, *b, kernels::matmul(&at, dy)?);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::AddPositional { x, pos } => {
                self.accumulate(grads, *x, dy.clone());
                if self.wants(*pos) {
                    let tp = self.val(*pos);
                    let r = dy.rank();
                    let block = dy.shape()[r - 2] * dy.shape()[r - 1];
                    let mut dp = Tensor::zeros(tp.shape());
                    for chunk in dy.data().chunks(block) {
                        for (o, g) in dp.data_mut().iter_mut().zip(chunk) {
                            *o += g;
                        }
                    }
                    self.accumulate(grads, *pos, dp);
                }
            }
            Op::Scale { x, c } => self.accumulate(grads, *x, dy.map(|g| g * c)),
            Op::Mul { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let d = dy.data().iter().zip(tb.data()).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *a, Tensor::new(ta.shape(), d)?);
                }
                if self.wants(*b) {
                    let d = dy.data().iter().zip(ta.data()).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *b, Tensor::new(tb.shape(), d)?);
                }
            }
            Op::Relu { x } => {
                let tx = self.val(*x);
                let d = dy
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(tx.shape(), d)?);
            }
            Op::Gelu { x } => {
                let tx = self.val(*x);
                let d = dy
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(g, &v)| g * kernels::gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(tx.shape(), d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let e = xhat.last_dim();
                let g = self.val(*gain).data();
                if self.wants(*gain) || self.wants(*shift) {
                    let mut dg = vec![0.0; e];
                    let mut ds = vec![0.0; e];
                    for (dr, hr) in dy.data().chunks(e).zip(xhat.data().chunks(e)) {
                        for j in 0..e {
                            dg[j] += dr[j] * hr[j];
                            ds[j] += dr[j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new([e], dg)?);
                    self.accumulate(grads, *shift, Tensor::new([e], ds)?);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    let ef = e as f64;
                    for (r, is) in inv_std.iter().enumerate() {
                        let dr = &dy.data()[r * e..(r + 1) * e];
                        let hr = &xhat.data()[r * e..(r + 1) * e];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..e {
                            let dh = dr[j] * g[j];
                            sum_d += dh;
                            sum_dh += dh * hr[j];
                        }
                        for j in 0..e {
                            let dh = dr[j] * g[j];
                            dx[r * e + j] = is / ef * (ef * dh - sum_d - hr[j] * sum_dh);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xhat.shape(), dx)?);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (tq, tk, tv) = (self.val(*q), self.val(*k), self.val(*v));
                let r = tq.rank();
                let (t, e) = (tq.shape()[r - 2], tq.shape()[r - 1]);
                let heads = *heads;
                let dh = e / heads;
                let n = tq.len() / (t * e);
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd, dd) = (tq.data(), tk.data(), tv.data(), dy.data());
                let mut dq = vec![0.0; tq.len()];
                let mut dk = vec![0.0; tq.len()];
                let mut dv = vec![0.0; tq.len()];
                let mut dp = vec![0.0; t];
                for s in 0..n {
                    let base = s * t * e;
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..t {
                            let prow = &probs[((s * heads + h) * t + i) * t..][..t];
                            let doi = &dd[base + i * e + off..][..dh];
                            for j in 0..t {
                                let vj = &vd[base + j * e + off..][..dh];
                                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                let dvj = &mut dv[base + j * e + off..][..dh];
                                for (o, g) in dvj.iter_mut().zip(doi) {
                                    *o += prow[j] * g;
                                }
                            }
                            let dot: f64 = prow.iter().zip(&dp).map(|(p, d)| p * d).sum();
                            for j in 0..t {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kd[base + j * e + off..][..dh];
                                let dqi = &mut dq[base + i * e + off..][..dh];
                                for (o, kv) in dqi.iter_mut().zip(kj) {
                                    *o += ds * kv;
                                }
                                let qi = &qd[base + i * e + off..][..dh];
                                let dkj = &mut dk[base + j * e + off..][..dh];
                                for (o, qv) in dkj.iter_mut().zip(qi) {
                                    *o += ds * qv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, Tensor::new(tq.shape(), dq)?);
                self.accumulate(grads, *k, Tensor::new(tq.shape(), dk)?);
                self.accumulate(grads, *v, Tensor::new(tq.shape(), dv)?);
            }
            Op::Reshape { x } => {
                let shape = self.val(*x).shape().to_vec();
                self.accumulate(grads, *x, dy.clone().reshape(shape)?);
            }
            Op::MeanTokens { x } => {
                let tx = self.val(*x);
                let r = tx.rank();
                let (t, e) = (tx.shape()[r - 2], tx.shape()[r - 1]);
                let mut dx = vec![0.0; tx.len()];
                for (g, grow) in dy.data().chunks(e).enumerate() {
                    for tok in 0..t {
                        for (o, gv) in dx[(g * t + tok) * e..][..e].iter_mut().zip(grow) {
                            *o = gv / t as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape(), dx)?);
            }
            Op::ChannelMix { x, w, b } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (bsz, cin, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let cout = tw.shape()[0];
                let mut dx = vec![0.0; tx.len()];
                let mut dw = vec![0.0; tw.len()];
                let mut db = vec![0.0; cout];
                for bi in 0..bsz {
                    for co in 0..cout {
                        let g = &dy.data()[(bi * cout + co) * len..][..len];
                        db[co] += g.iter().sum::<f64>();
                        for ci in 0..cin {
                            let xr = &tx.data()[(bi * cin + ci) * len..][..len];
                            dw[co * cin + ci] += g.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                            let wv = tw.data()[co * cin + ci];
                            for (o, gv) in dx[(bi * cin + ci) * len..][..len].iter_mut().zip(g) {
                                *o += wv * gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape(), dx)?);
                self.accumulate(grads, *w, Tensor::new(tw.shape(), dw)?);
                self.accumulate(grads, *b, Tensor::new([cout], db)?);
            }
            Op::Windows { x, window, stride } => {
                let tx = self.val(*x);
                let (bsz, c, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let n = (len - window) / stride + 1;
                let mut dx = vec![0.0; tx.len()];
                let mut src = dy.data().chunks(*window);
                for b in 0..bsz {
                    for j in 0..n {
                        for ch in 0..c {
                            let start = (b * c + ch) * len + j * stride;
                            let g = src.next().expect("window gradient length");
                            for (o, gv) in dx[start..start + window].iter_mut().zip(g) {
                                *o += gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape(), dx)?);
            }
            Op::Softmax { x } => {
                let y = &self.nodes[i].value;
                let n = y.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((o, yr), gr) in dx.chunks_mut(n).zip(y.data().chunks(n)).zip(dy.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), dx)?);
            }
            Op::Sum { x } => {
                let g = dy.item();
                self.accumulate(grads, *x, Tensor::full(self.val(*x).shape(), g));
            }
            Op::Mse { pred, target } => {
                let tp = self.val(*pred);
                let c = 2.0 * dy.item() / tp.len().max(1) as f64;
                let d = tp.data().iter().zip(target.data()).map(|(p, t)| c * (p - t)).collect();
                self.accumulate(grads, *pred, Tensor::new(tp.shape(), d)?);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.last_dim();
                let c = dy.item() / labels.len().max(1) as f64;
                let mut d = probs.data().to_vec();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= 1.0;
                }
                for v in d.iter_mut() {
                    *v *= c;
                }
                self.accumulate(grads, *logits, Tensor::new(probs.shape(), d)?);
            }
            Op::Hinge { scores, labels, margin } => {
                let ts = self.val(*scores);
                let k = ts.last_dim();
                let c = dy.item() / labels.len().max(1) as f64;
                let mut d = vec![0.0; ts.len()];
                for (r, &l) in labels.iter().enumerate() {
                    for j in 0..k {
                        let s = ovr_sign(j, l, k);
                        if margin - s * ts.data()[r * k + j] > 0.0 {
                            d[r * k + j] = -s * c;
                        }
                    }
                }
                self.accumulate(grads, *scores, Tensor::new(ts.shape(), d)?);
            }
        }
        Ok(())
    }
}

/// Gradients of the keyed leaves after [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    keys: IndexMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.keys.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.keys.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn into_map(self) -> IndexMap<String, Tensor> {
        self.keys
    }
}
