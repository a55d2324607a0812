use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::ops::{self, ConvGeom, PROB_CLAMP};
use crate::{Error, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannelBias(Var, Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    MaskedSoftmax(Var),
    Conv1d(Var, Var, ConvGeom),
    Transpose(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    MeanRows(Var),
    PairScores(Var, Var, usize),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Sum(Var),
    BceProb {
        pred: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        valid: usize,
    },
    BceLogits {
        logits: Var,
        target: Vec<f64>,
        pos_weight: Vec<f64>,
        weight: Vec<f64>,
        valid: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// A tape is single-threaded; build one per independent forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require gradients or is not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros of the right shape for
    /// unreachable values.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut [f64] {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.dims2().ok_or_else(|| Error::shape(op, t.shape(), &[]))
    }

    /// `A[m×k] · B[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let data = ops::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Adds `bias[c]` to every entry of row `c` of `x[C×L]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, l) = self.dims2("add_channel_bias", x)?;
        if self.value(bias).len() != c {
            return Err(Error::shape(
                "add_channel_bias",
                self.value(x).shape(),
                self.value(bias).shape(),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for (row, &bv) in data.chunks_mut(l.max(1)).zip(b) {
            for v in row {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(vec![c, l], data)?, Op::AddChannelBias(x, bias), rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Contract(format!("leaky_relu slope {slope} outside (0, 1)")));
        }
        let tx = self.value(x);
        if tx.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("leaky_relu input contains NaN".into()));
        }
        let data = tx
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LeakyRelu(x, slope), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| ops::sigmoid(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Softmax along the last axis, restricted to `mask` (same element count
    /// as `scores`). Masked-out entries are exactly zero.
    pub fn masked_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let ts = self.value(scores);
        let width = *ts.shape().last().unwrap_or(&1);
        let data = ops::masked_softmax_forward(ts.data(), mask, width)?;
        let value = Tensor::new(ts.shape().to_vec(), data)?;
        let rg = self.rg(&[scores]);
        Ok(self.push(value, Op::MaskedSoftmax(scores), rg))
    }

    /// 1D cross-correlation of `x[C_in×L]` with `kernels[C_out×C_in×K]`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(x).shape(),
            self.value(kernels).shape(),
            stride,
            padding,
        )?;
        let data = ops::conv1d_raw(self.value(x).data(), self.value(kernels).data(), &geom);
        let value = Tensor::new(vec![geom.c_out, geom.len_out], data)?;
        let rg = self.rg(&[x, kernels]);
        Ok(self.push(value, Op::Conv1d(x, kernels, geom), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_rows", x)?;
        if start > end || end > r {
            return Err(Error::shape("slice_rows", self.value(x).shape(), &[start, end]));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![end - start, c], data)?, Op::SliceRows(x, start), rg))
    }

    /// Column means of `x[r×c]` as a `[1×c]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("mean_rows", x)?;
        if r == 0 {
            return Err(Error::shape("mean_rows", self.value(x).shape(), &[]));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; c];
        for row in src.chunks(c.max(1)) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        let inv = 1.0 / r as f64;
        for d in &mut data {
            *d *= inv;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![1, c], data)?, Op::MeanRows(x), rg))
    }

    /// `E[i][j] = src[i][head] + dst[j][head]` for `src, dst` of shape `[m×H]`.
    pub fn pair_scores(&mut self, src: Var, dst: Var, head: usize) -> Result<Var> {
        self.same_shape("pair_scores", src, dst)?;
        let (m, h) = self.dims2("pair_scores", src)?;
        if head >= h {
            return Err(Error::shape("pair_scores", self.value(src).shape(), &[head]));
        }
        let (s, d) = (self.value(src).data(), self.value(dst).data());
        let mut data = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                data[i * m + j] = s[i * h + head] + d[j * h + head];
            }
        }
        let rg = self.rg(&[src, dst]);
        Ok(self.push(Tensor::new(vec![m, m], data)?, Op::PairScores(src, dst, head), rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols needs at least one input".into()))?;
        let (r, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2("concat_cols", p)?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![r, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks equal-length row vectors into `[rows × D]`, zero-filling rows
    /// past `rows.len()`.
    pub fn stack_rows(&mut self, rows: &[Var], total_rows: usize, width: usize) -> Result<Var> {
        if rows.len() > total_rows {
            return Err(Error::Contract(format!(
                "stack_rows: {} rows exceed capacity {total_rows}",
                rows.len()
            )));
        }
        let mut data = vec![0.0; total_rows * width];
        for (i, &r) in rows.iter().enumerate() {
            let src = self.value(r);
            if src.len() != width {
                return Err(Error::shape("stack_rows", src.shape(), &[width]));
            }
            data[i * width..(i + 1) * width].copy_from_slice(src.data());
        }
        let rg = self.rg(rows);
        Ok(self.push(
            Tensor::new(vec![total_rows, width], data)?,
            Op::StackRows(rows.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean binary cross-entropy over the first `valid` probabilities,
    /// `−w_i[y_i·ln p_i + (1−y_i)·ln(1−p_i)]` with `p` clamped to
    /// `[PROB_CLAMP, 1−PROB_CLAMP]`.
    pub fn bce_prob(&mut self, pred: Var, target: &[f64], weight: &[f64], valid: usize) -> Result<Var> {
        let p = self.value(pred);
        let n = p.len();
        if target.len() != n || weight.len() != n || valid > n {
            return Err(Error::shape("bce_prob", p.shape(), &[target.len(), weight.len(), valid]));
        }
        let mut total = 0.0;
        for i in 0..valid {
            let pc = p.data()[i].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let y = target[i];
            total += -weight[i] * (y * libm::log(pc) + (1.0 - y) * libm::log(1.0 - pc));
        }
        let loss = if valid == 0 { 0.0 } else { total / valid as f64 };
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceProb {
                pred,
                target: target.to_vec(),
                weight: weight.to_vec(),
                valid,
            },
            rg,
        ))
    }

    /// Mean weighted binary cross-entropy with logits over the first `valid`
    /// rows of `logits[N×K]`:
    /// `w_ic·[p_c·y·softplus(−x) + (1−y)·softplus(x)]`.
    pub fn bce_logits(
        &mut self,
        logits: Var,
        target: &[f64],
        pos_weight: &[f64],
        weight: &[f64],
        valid: usize,
    ) -> Result<Var> {
        let (n, k) = self.dims2("bce_logits", logits)?;
        if target.len() != n * k || weight.len() != n * k || pos_weight.len() != k || valid > n {
            return Err(Error::shape(
                "bce_logits",
                self.value(logits).shape(),
                &[target.len(), pos_weight.len(), weight.len(), valid],
            ));
        }
        let x = self.value(logits).data();
        let mut total = 0.0;
        for i in 0..valid * k {
            let c = i % k;
            let y = target[i];
            total += weight[i]
                * (pos_weight[c] * y * ops::softplus(-x[i]) + (1.0 - y) * ops::softplus(x[i]));
        }
        let loss = if valid == 0 {
            0.0
        } else {
            total / (valid * k) as f64
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                target: target.to_vec(),
                pos_weight: pos_weight.to_vec(),
                weight: weight.to_vec(),
                valid,
            },
            rg,
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            self.backprop_node(node, g, before);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().expect("matrix");
                let n = val(*b).dims2().expect("matrix").1;
                if wants(*a) {
                    let bd = val(*b).data();
                    let da = accumulate(&mut grads[a.0], m * k);
                    for i in 0..m {
                        for t in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[t * n + j];
                            }
                            da[i * k + t] += acc;
                        }
                    }
                }
                if wants(*b) {
                    let ad = val(*a).data();
                    let db = accumulate(&mut grads[b.0], k * n);
                    for i in 0..m {
                        for t in 0..k {
                            let av = ad[i * k + t];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[t * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        let d = accumulate(&mut grads[v.0], g.len());
                        for (dv, gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if wants(v) {
                        let od = val(other).data();
                        let d = accumulate(&mut grads[v.0], g.len());
                        for ((dv, gv), ov) in d.iter_mut().zip(g).zip(od) {
                            *dv += gv * ov;
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                let d = accumulate(&mut grads[a.0], g.len());
                for (dv, gv) in d.iter_mut().zip(g) {
                    *dv += gv * f;
                }
            }
            Op::AddChannelBias(x, b) => {
                let (c, l) = val(*x).dims2().expect("matrix");
                if wants(*x) {
                    let d = accumulate(&mut grads[x.0], g.len());
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                if wants(*b) {
                    let d = accumulate(&mut grads[b.0], c);
                    for (ci, dv) in d.iter_mut().enumerate() {
                        *dv += g[ci * l..(ci + 1) * l].iter().sum::<f64>();
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xd = val(*x).data();
                let d = accumulate(&mut grads[x.0], g.len());
                for ((dv, gv), xv) in d.iter_mut().zip(g).zip(xd) {
                    *dv += if *xv >= 0.0 { *gv } else { gv * slope };
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = accumulate(&mut grads[x.0], g.len());
                for ((dv, gv), yv) in d.iter_mut().zip(g).zip(y) {
                    *dv += gv * yv * (1.0 - yv);
                }
            }
            Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap_or(&1);
                let d = accumulate(&mut grads[x.0], g.len());
                for ((drow, grow), yrow) in d.chunks_mut(width).zip(g.chunks(width)).zip(y.chunks(width)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv += yv * (gv - dot);
                    }
                }
            }
            Op::Conv1d(x, k, geom) => {
                let (xd, kd) = (val(*x).data(), val(*k).data());
                let (xi, ki) = (x.0, k.0);
                let mut dx = wants(*x).then(|| grads[xi].take().unwrap_or_else(|| vec![0.0; xd.len()]));
                let mut dk = wants(*k).then(|| grads[ki].take().unwrap_or_else(|| vec![0.0; kd.len()]));
                ops::conv1d_backward(xd, kd, g, geom, dx.as_deref_mut(), dk.as_deref_mut());
                if let Some(dx) = dx {
                    grads[xi] = Some(dx);
                }
                if let Some(dk) = dk {
                    grads[ki] = Some(dk);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = val(*x).dims2().expect("matrix");
                let d = accumulate(&mut grads[x.0], r * c);
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(x) => {
                let d = accumulate(&mut grads[x.0], g.len());
                for (dv, gv) in d.iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                let d = accumulate(&mut grads[x.0], n);
                for dv in d.iter_mut() {
                    *dv += g[0];
                }
            }
            Op::SliceRows(x, start) => {
                let n = val(*x).len();
                let c = val(*x).dims2().expect("matrix").1;
                let d = accumulate(&mut grads[x.0], n);
                for (dv, gv) in d[start * c..start * c + g.len()].iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = val(*x).dims2().expect("matrix");
                let inv = 1.0 / r as f64;
                let d = accumulate(&mut grads[x.0], r * c);
                for row in d.chunks_mut(c.max(1)) {
                    for (dv, gv) in row.iter_mut().zip(g) {
                        *dv += gv * inv;
                    }
                }
            }
            Op::PairScores(src, dst, head) => {
                let (m, h) = val(*src).dims2().expect("matrix");
                if wants(*src) {
                    let d = accumulate(&mut grads[src.0], m * h);
                    for i in 0..m {
                        d[i * h + head] += g[i * m..(i + 1) * m].iter().sum::<f64>();
                    }
                }
                if wants(*dst) {
                    let d = accumulate(&mut grads[dst.0], m * h);
                    for j in 0..m {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += g[i * m + j];
                        }
                        d[j * h + head] += acc;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2().expect("matrix");
                let mut off = 0;
                for &p in parts {
                    let w = val(p).dims2().expect("matrix").1;
                    if wants(p) {
                        let d = accumulate(&mut grads[p.0], r * w);
                        for i in 0..r {
                            for j in 0..w {
                                d[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::StackRows(rows) => {
                let width = node.value.dims2().expect("matrix").1;
                for (i, &r) in rows.iter().enumerate() {
                    if wants(r) {
                        let d = accumulate(&mut grads[r.0], width);
                        for (dv, gv) in d.iter_mut().zip(&g[i * width..(i + 1) * width]) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::BceProb {
                pred,
                target,
                weight,
                valid,
            } => {
                let p = val(*pred).data();
                let d = accumulate(&mut grads[pred.0], p.len());
                if *valid == 0 {
                    return;
                }
                let scale = g[0] / *valid as f64;
                for i in 0..*valid {
                    let pv = p[i];
                    if pv > PROB_CLAMP && pv < 1.0 - PROB_CLAMP {
                        let y = target[i];
                        d[i] += scale * -weight[i] * (y / pv - (1.0 - y) / (1.0 - pv));
                    }
                }
            }
            Op::BceLogits {
                logits,
                target,
                pos_weight,
                weight,
                valid,
            } => {
                let x = val(*logits).data();
                let k = pos_weight.len();
                let d = accumulate(&mut grads[logits.0], x.len());
                if *valid == 0 {
                    return;
                }
                let scale = g[0] / (*valid * k) as f64;
                for i in 0..*valid * k {
                    let y = target[i];
                    let c = i % k;
                    d[i] += scale
                        * weight[i]
                        * (-pos_weight[c] * y * ops::sigmoid(-x[i]) + (1.0 - y) * ops::sigmoid(x[i]));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let m = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let out = tape.matmul(p, m).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b).unwrap_err() {
            Error::Shape { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [2, 3]);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn leaky_relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(alloc::vec![0.0, -1.0, 3.5]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, -0.2, 3.5]);
        let y = tape.leaky_relu(x, 0.01).unwrap();
        assert_eq!(tape.value(y).data()[2], 3.5);
        assert!(tape.leaky_relu(x, 1.0).is_err());
        let nan = tape.constant(Tensor::vector(alloc::vec![f64::NAN]));
        assert!(matches!(tape.leaky_relu(nan, 0.2), Err(Error::NonFinite(_))));
    }

    #[test]
    fn masked_softmax_cases() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(alloc::vec![0.3; 4]));
        let y = tape.masked_softmax(s, &[true; 4]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);

        let s = tape.constant(Tensor::vector(alloc::vec![7.0, -2.0, 1.0]));
        let y = tape.masked_softmax(s, &[false, true, false]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0]);

        let s = tape.constant(Tensor::vector(alloc::vec![1.0, 2.0, 3.0]));
        let y = tape.masked_softmax(s, &[true; 3]).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in tape.value(y).data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_hand_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let id = tape.constant(t(&[1, 1, 1], &[1.0]));
        let y = tape.conv1d(x, id, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let k = tape.constant(t(&[1, 1, 2], &[1.0, 1.0]));
        let y = tape.conv1d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0, 7.0]);
        // cross-correlation: kernel [1, 0] picks the left tap, not the right one
        let k = tape.constant(t(&[1, 1, 2], &[1.0, 0.0]));
        let y = tape.conv1d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
        let y = tape.conv1d(x, k, 2, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0, 4.0]);
    }

    #[test]
    fn backward_identity_and_linear() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(alloc::vec![1.0, -2.0, 0.5]));
        let y = tape.scale(x, 2.0);
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(alloc::vec![1.5, -0.5]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let l = tape.sum(z);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(alloc::vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(alloc::vec![1.0, 2.0]));
        let x = tape.leaf(Tensor::vector(alloc::vec![3.0, 4.0]));
        let y = tape.mul(c, x).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn bce_losses_empty_valid_is_zero() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(alloc::vec![0.3, 0.9]));
        let l = tape.bce_prob(p, &[1.0, 0.0], &[1.0, 1.0], 0).unwrap();
        assert_eq!(tape.value(l).item(), Some(0.0));
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 0.0]);

        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let l = tape.bce_logits(x, &[1.0; 4], &[1.0; 2], &[1.0; 4], 0).unwrap();
        assert_eq!(tape.value(l).item(), Some(0.0));
    }
}
