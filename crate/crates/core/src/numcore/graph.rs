//! Tape-based reverse-mode differentiation over batched tensors.
//!
//! Every op constructor evaluates eagerly and appends a node. Creation order
//! is a topological order, so [`Graph::backward`] walks the tape in reverse
//! and visits each node once.

use rand::Rng;

use super::real::{matmul, Trans};
use super::{NumError, Param, Real, Tensor};

/// Canonical self-normalising SELU constants.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-3;

/// Probability floor inside the cross-entropy logarithm.
pub const CCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Dense,
    Conv1d,
    LstmCell,
    BatchNorm,
    Dropout,
    Relu,
    Selu,
    Softmax,
    SoftmaxCce,
    ColumnPool,
    Concat,
    Slice,
    Reshape,
    Attention,
    Add,
    SumProduct,
}

/// Reduction used by [`Graph::column_pool`]. Only `Sum` is used by the
/// production encoder; the others exist for pooling comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Sum,
    Mean,
    Max,
}

/// Batch statistics computed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Dense { bias: bool },
    Conv1d { kernel: usize, pad_left: usize },
    LstmCell { hidden: usize, gates: Vec<T>, tanh_c: Vec<T> },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Dropout { mask: Vec<T> },
    Relu,
    Selu,
    Softmax,
    SoftmaxCce { probs: Vec<T>, labels: Vec<usize> },
    ColumnPool { mode: PoolMode, argmax: Vec<usize> },
    Concat { widths: Vec<usize> },
    Slice { start: usize },
    Reshape,
    Attention { probs: Vec<T>, scale: T },
    Add,
    SumProduct { weights: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Dense { .. } => OpKind::Dense,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::LstmCell { .. } => OpKind::LstmCell,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Relu => OpKind::Relu,
            Op::Selu => OpKind::Selu,
            Op::Softmax => OpKind::Softmax,
            Op::SoftmaxCce { .. } => OpKind::SoftmaxCce,
            Op::ColumnPool { .. } => OpKind::ColumnPool,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape => OpKind::Reshape,
            Op::Attention { .. } => OpKind::Attention,
            Op::Add => OpKind::Add,
            Op::SumProduct { .. } => OpKind::SumProduct,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
    param: Option<String>,
}

pub struct Graph<T: Real = f32> {
    mode: Mode,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    fault: Option<OpKind>,
}

fn shape_err(msg: String) -> NumError {
    NumError::Shape(msg)
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self { mode, nodes: Vec::new(), grads: Vec::new(), backward_done: false, fault: None }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Every node in creation order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Gradient accumulated into `id` by the last backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Breaks the backward rule of one op kind by scaling its input
    /// gradients. Negative control for gradient checking only.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad, param: None });
        NodeId(self.nodes.len() - 1)
    }

    // ---------------------------------------------------------------- leaves

    /// Constant or differentiable input, depending on `t.requires_grad`.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        let requires_grad = t.requires_grad;
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value: t, requires_grad, param: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Parameter leaf. Running statistics never receive gradients.
    pub fn param(&mut self, p: &Param<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: p.value.clone(),
            requires_grad: p.role.trainable(),
            param: Some(p.name.clone()),
        });
        NodeId(self.nodes.len() - 1)
    }

    // ----------------------------------------------------------- primitives

    /// `x·w (+ b)` with `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, NumError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(shape_err(format!("dense: expected rank-2 input and weight, got {xs:?} and {ws:?}")));
        }
        if xs[1] != ws[0] {
            return Err(shape_err(format!(
                "dense: input features (dim 1) = {} but weight rows (dim 0) = {}",
                xs[1], ws[0]
            )));
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); batch * fout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != fout {
                return Err(shape_err(format!("dense: bias length {} but output features = {fout}", bv.numel())));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv.data());
            }
        }
        matmul(self.value(x).data(), batch, fin, Trans::N, self.value(w).data(), fin, fout, Trans::N, &mut out, b.is_some());
        let value = Tensor::new(vec![batch, fout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Dense { bias: b.is_some() }, inputs, value))
    }

    /// Same-padded 1-D convolution: `x: [B, L, Cin]`, `w: [K, Cin, Cout]`,
    /// `b: [Cout]` → `[B, L, Cout]`. Even kernels pad one more on the right.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(shape_err(format!("conv1d: expected [B,L,C] input and [K,Cin,Cout] kernel, got {xs:?} and {ws:?}")));
        }
        if xs[2] != ws[1] {
            return Err(shape_err(format!(
                "conv1d: input channels (dim 2) = {} but kernel in-channels (dim 1) = {}",
                xs[2], ws[1]
            )));
        }
        let (batch, len, cin) = (xs[0], xs[1], xs[2]);
        let (kernel, cout) = (ws[0], ws[2]);
        if self.value(b).numel() != cout {
            return Err(shape_err(format!(
                "conv1d: bias length {} but out-channels (dim 2 of kernel) = {cout}",
                self.value(b).numel()
            )));
        }
        let pad_left = (kernel - 1) / 2;
        let col = im2col(self.value(x).data(), batch, len, cin, kernel, pad_left);
        let mut out = vec![T::zero(); batch * len * cout];
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(self.value(b).data());
        }
        matmul(&col, batch * len, kernel * cin, Trans::N, self.value(w).data(), kernel * cin, cout, Trans::N, &mut out, true);
        let value = Tensor::new(vec![batch, len, cout], out)?;
        Ok(self.push(Op::Conv1d { kernel, pad_left }, vec![x, w, b], value))
    }

    /// One LSTM step. `state` packs `[h, c]` as `[B, 2H]`; gate order in the
    /// weight columns is input, forget, candidate, output.
    pub fn lstm_cell(
        &mut self,
        x: NodeId,
        state: NodeId,
        w_ih: NodeId,
        w_hh: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, NumError> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(state).to_vec();
        let wi = self.shape(w_ih).to_vec();
        let wh = self.shape(w_hh).to_vec();
        if xs.len() != 2 || ss.len() != 2 || wi.len() != 2 || wh.len() != 2 {
            return Err(shape_err("lstm_cell: all operands must be rank 2".into()));
        }
        let (batch, fin) = (xs[0], xs[1]);
        let hidden = wh[0];
        if ss != [batch, 2 * hidden] {
            return Err(shape_err(format!(
                "lstm_cell: state shape {ss:?} but expected [batch={batch}, 2*hidden={}]",
                2 * hidden
            )));
        }
        if wi != [fin, 4 * hidden] || wh != [hidden, 4 * hidden] {
            return Err(shape_err(format!(
                "lstm_cell: weights {wi:?}/{wh:?} do not match input features {fin} and hidden {hidden}"
            )));
        }
        if self.value(bias).numel() != 4 * hidden {
            return Err(shape_err(format!("lstm_cell: bias length {} but 4*hidden = {}", self.value(bias).numel(), 4 * hidden)));
        }
        let g4 = 4 * hidden;
        let mut z = vec![T::zero(); batch * g4];
        for row in z.chunks_mut(g4) {
            row.copy_from_slice(self.value(bias).data());
        }
        matmul(self.value(x).data(), batch, fin, Trans::N, self.value(w_ih).data(), fin, g4, Trans::N, &mut z, true);
        let sv = self.value(state).data();
        // h is the left half of each state row
        T::gemm_raw(
            batch, hidden, g4, T::one(), sv, (2 * hidden) as isize, 1,
            self.value(w_hh).data(), g4 as isize, 1, T::one(), &mut z, g4 as isize, 1,
        );
        let mut out = vec![T::zero(); batch * 2 * hidden];
        let mut tanh_c = vec![T::zero(); batch * hidden];
        for bi in 0..batch {
            let zr = &mut z[bi * g4..(bi + 1) * g4];
            for j in 0..hidden {
                let i_g = sigmoid(zr[j]);
                let f_g = sigmoid(zr[hidden + j]);
                let c_g = zr[2 * hidden + j].tanh();
                let o_g = sigmoid(zr[3 * hidden + j]);
                zr[j] = i_g;
                zr[hidden + j] = f_g;
                zr[2 * hidden + j] = c_g;
                zr[3 * hidden + j] = o_g;
                let c_prev = sv[bi * 2 * hidden + hidden + j];
                let c_new = f_g * c_prev + i_g * c_g;
                let tc = c_new.tanh();
                tanh_c[bi * hidden + j] = tc;
                out[bi * 2 * hidden + j] = o_g * tc;
                out[bi * 2 * hidden + hidden + j] = c_new;
            }
        }
        let value = Tensor::new(vec![batch, 2 * hidden], out)?;
        Ok(self.push(Op::LstmCell { hidden, gates: z, tanh_c }, vec![x, state, w_ih, w_hh, bias], value))
    }

    /// Per-feature batch norm on `[B, F]`. In training mode batch statistics
    /// are used and returned; in inference mode `running` is applied.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<(NodeId, Option<BatchStats>), NumError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err(format!("batch_norm: expected [B,F] input, got {xs:?}")));
        }
        let (batch, feat) = (xs[0], xs[1]);
        for (what, n) in [
            ("gamma", self.value(gamma).numel()),
            ("beta", self.value(beta).numel()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if n != feat {
                return Err(shape_err(format!("batch_norm: {what} length {n} but features (dim 1) = {feat}")));
            }
        }
        let xv = self.value(x).data();
        let training = self.mode == Mode::Train;
        let (mean, var): (Vec<f64>, Vec<f64>) = if training {
            let mut mean = vec![0.0f64; feat];
            let mut sq = vec![0.0f64; feat];
            for row in xv.chunks(feat) {
                for (j, &v) in row.iter().enumerate() {
                    mean[j] += v.f64();
                }
            }
            mean.iter_mut().for_each(|m| *m /= batch as f64);
            for row in xv.chunks(feat) {
                for (j, &v) in row.iter().enumerate() {
                    let d = v.f64() - mean[j];
                    sq[j] += d * d;
                }
            }
            (mean, sq.into_iter().map(|s| s / batch as f64).collect())
        } else {
            (running_mean.iter().map(|v| v.f64()).collect(), running_var.iter().map(|v| v.f64()).collect())
        };
        let mean_t: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
        let inv_std: Vec<T> = var.iter().map(|&v| T::lit(1.0 / (v + BN_EPS).sqrt())).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); batch * feat];
        let mut out = vec![T::zero(); batch * feat];
        for (bi, row) in xv.chunks(feat).enumerate() {
            for j in 0..feat {
                let h = (row[j] - mean_t[j]) * inv_std[j];
                xhat[bi * feat + j] = h;
                out[bi * feat + j] = g[j] * h + bt[j];
            }
        }
        let value = Tensor::new(vec![batch, feat], out)?;
        let id = self.push(Op::BatchNorm { xhat, inv_std, batch_stats: training }, vec![x, gamma, beta], value);
        Ok((id, training.then_some(BatchStats { mean, var })))
    }

    /// Inverted dropout. Identity (no node) in inference mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> Result<NodeId, NumError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(shape_err(format!("dropout: rate {rate} outside [0, 1)")));
        }
        if self.mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = T::lit(1.0 / keep);
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { mask }, vec![x], value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu, vec![x], value)
    }

    pub fn selu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(selu);
        self.push(Op::Selu, vec![x], value)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let width = *xv.shape().last().unwrap_or(&1);
        let mut data = xv.data().to_vec();
        data.chunks_mut(width).for_each(softmax_row);
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(Op::Softmax, vec![x], value)
    }

    /// Mean categorical cross-entropy of softmax(`logits`) against class
    /// indices. Fused so the logit gradient is exactly `p̂ − p`.
    pub fn softmax_cce(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, NumError> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(shape_err(format!(
                "softmax_cce: logits {ls:?} but {} labels (batch, dim 0)",
                labels.len()
            )));
        }
        let m = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(shape_err(format!("softmax_cce: label {bad} outside classes (dim 1) = {m}")));
        }
        let mut probs = self.value(logits).data().to_vec();
        probs.chunks_mut(m).for_each(softmax_row);
        let loss: f64 = probs
            .chunks(m)
            .zip(labels)
            .map(|(row, &l)| -row[l].f64().max(CCE_FLOOR).ln())
            .sum::<f64>()
            / labels.len().max(1) as f64;
        let value = Tensor::scalar(T::lit(loss));
        Ok(self.push(Op::SoftmaxCce { probs, labels: labels.to_vec() }, vec![logits], value))
    }

    /// Reduce `[B, L, C]` over `L` to `[B, C]`.
    pub fn column_pool(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId, NumError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err(format!("column_pool: expected [B,L,C] input, got {xs:?}")));
        }
        let (batch, len, ch) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); batch * ch];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Sum | PoolMode::Mean => {
                let mut acc = vec![0.0f64; ch];
                for bi in 0..batch {
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for t in 0..len {
                        let row = &xv[(bi * len + t) * ch..(bi * len + t + 1) * ch];
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v.f64();
                        }
                    }
                    let div = if mode == PoolMode::Mean { len as f64 } else { 1.0 };
                    for (o, a) in out[bi * ch..(bi + 1) * ch].iter_mut().zip(&acc) {
                        *o = T::lit(a / div);
                    }
                }
            }
            PoolMode::Max => {
                argmax = vec![0usize; batch * ch];
                for bi in 0..batch {
                    for c in 0..ch {
                        let mut best = 0;
                        for t in 1..len {
                            if xv[(bi * len + t) * ch + c] > xv[(bi * len + best) * ch + c] {
                                best = t;
                            }
                        }
                        argmax[bi * ch + c] = best;
                        out[bi * ch + c] = xv[(bi * len + best) * ch + c];
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, ch], out)?;
        Ok(self.push(Op::ColumnPool { mode, argmax }, vec![x], value))
    }

    /// Concatenate along the last dimension; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, NumError> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat: no inputs".into()));
        };
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_err(format!("concat: leading dims {:?} differ from {:?}", &s[..s.len() - 1], lead)));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Concat { widths }, parts.to_vec(), value))
    }

    /// `x[..., start..start+len]`.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumError> {
        let s = self.shape(x).to_vec();
        let width = *s.last().unwrap_or(&0);
        if start + len > width {
            return Err(shape_err(format!("slice: range {start}..{} exceeds last dim = {width}", start + len)));
        }
        let rows = self.value(x).numel() / width.max(1);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * width + start..r * width + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Slice { start }, vec![x], value))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NumError> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value.with_grad(false)))
    }

    /// Scaled dot-product attention on `q, k: [B, S, d]`, `v: [B, S, dv]`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId, NumError> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
            return Err(shape_err(format!("attention: expected [B,S,d] operands, got {qs:?} {ks:?} {vs:?}")));
        }
        if qs[0] != ks[0] || ks[0] != vs[0] || qs[2] != ks[2] || ks[1] != vs[1] {
            return Err(shape_err(format!(
                "attention: query {qs:?}, key {ks:?}, value {vs:?} disagree on batch, key length or head dim"
            )));
        }
        let (batch, sq, d) = (qs[0], qs[1], qs[2]);
        let (sk, dv) = (ks[1], vs[2]);
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * sq * sk];
        let mut out = vec![T::zero(); batch * sq * dv];
        for bi in 0..batch {
            let qb = &qv[bi * sq * d..(bi + 1) * sq * d];
            let kb = &kv[bi * sk * d..(bi + 1) * sk * d];
            let vb = &vv[bi * sk * dv..(bi + 1) * sk * dv];
            let pb = &mut probs[bi * sq * sk..(bi + 1) * sq * sk];
            matmul(qb, sq, d, Trans::N, kb, sk, d, Trans::T, pb, false);
            for row in pb.chunks_mut(sk) {
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_row(row);
            }
            matmul(pb, sq, sk, Trans::N, vb, sk, dv, Trans::N, &mut out[bi * sq * dv..(bi + 1) * sq * dv], false);
        }
        let value = Tensor::new(vec![batch, sq, dv], out)?;
        Ok(self.push(Op::Attention { probs, scale }, vec![q, k, v], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("add: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    /// Scalar `Σ x ⊙ weights` with constant weights.
    pub fn sum_product(&mut self, x: NodeId, weights: &[T]) -> Result<NodeId, NumError> {
        if self.value(x).numel() != weights.len() {
            return Err(shape_err(format!(
                "sum_product: {} elements but {} weights",
                self.value(x).numel(),
                weights.len()
            )));
        }
        let s: f64 = self.value(x).data().iter().zip(weights).map(|(&a, &w)| (a * w).f64()).sum();
        let value = Tensor::scalar(T::lit(s));
        Ok(self.push(Op::SumProduct { weights: weights.to_vec() }, vec![x], value))
    }

    // ------------------------------------------------------------- backward

    /// Back-propagate from a scalar node.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumError> {
        if self.value(loss).numel() != 1 {
            return Err(NumError::NotScalar(self.shape(loss).to_vec()));
        }
        let seed = Tensor::full(self.shape(loss), T::one());
        self.backward_with(loss, seed)
    }

    /// Vector-Jacobian product: back-propagate an arbitrary output gradient.
    pub fn backward_with(&mut self, out: NodeId, seed: Tensor<T>) -> Result<(), NumError> {
        if self.backward_done {
            return Err(NumError::BackwardTwice);
        }
        if seed.shape() != self.shape(out) {
            return Err(shape_err(format!(
                "backward: seed gradient {:?} does not match output {:?}",
                seed.shape(),
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.inputs.is_empty() {
                let need: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
                let mut contribs = self.backward_node(id, &g, &need);
                if self.fault == Some(node.op.kind()) {
                    for (_, t) in contribs.iter_mut() {
                        t.data_mut().iter_mut().for_each(|v| *v *= T::lit(1.1));
                    }
                }
                for (inp, t) in contribs {
                    match &mut grads[inp.0] {
                        Some(acc) => acc.add_assign(&t),
                        slot @ None => *slot = Some(t),
                    }
                }
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    /// Gradients of every trainable parameter leaf, by parameter name.
    pub fn param_grads(&self) -> Vec<(String, Tensor<T>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let name = n.param.as_ref()?;
                if !n.requires_grad {
                    return None;
                }
                let g = self.grads.get(i)?.clone().unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                Some((name.clone(), g))
            })
            .collect()
    }

    fn backward_node(&self, id: usize, g: &Tensor<T>, need: &[bool]) -> Vec<(NodeId, Tensor<T>)> {
        let node = &self.nodes[id];
        let inp = |k: usize| &self.nodes[node.inputs[k].0].value;
        let mut out: Vec<(NodeId, Tensor<T>)> = Vec::new();
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Dense { bias } => {
                let (x, w) = (inp(0), inp(1));
                let (batch, fin) = (x.shape()[0], x.shape()[1]);
                let fout = w.shape()[1];
                if need[0] {
                    let mut dx = vec![T::zero(); batch * fin];
                    matmul(gd, batch, fout, Trans::N, w.data(), fin, fout, Trans::T, &mut dx, false);
                    out.push((node.inputs[0], Tensor::new(vec![batch, fin], dx).unwrap()));
                }
                if need[1] {
                    let mut dw = vec![T::zero(); fin * fout];
                    matmul(x.data(), batch, fin, Trans::T, gd, batch, fout, Trans::N, &mut dw, false);
                    out.push((node.inputs[1], Tensor::new(vec![fin, fout], dw).unwrap()));
                }
                if *bias && need[2] {
                    out.push((node.inputs[2], Tensor::new(vec![fout], col_sums(gd, fout)).unwrap()));
                }
            }
            Op::Conv1d { kernel, pad_left } => {
                let (x, w) = (inp(0), inp(1));
                let (batch, len, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let cout = w.shape()[2];
                let kc = kernel * cin;
                if need[1] {
                    let col = im2col(x.data(), batch, len, cin, *kernel, *pad_left);
                    let mut dw = vec![T::zero(); kc * cout];
                    matmul(&col, batch * len, kc, Trans::T, gd, batch * len, cout, Trans::N, &mut dw, false);
                    out.push((node.inputs[1], Tensor::new(w.shape().to_vec(), dw).unwrap()));
                }
                if need[2] {
                    out.push((node.inputs[2], Tensor::new(vec![cout], col_sums(gd, cout)).unwrap()));
                }
                if need[0] {
                    let mut dcol = vec![T::zero(); batch * len * kc];
                    matmul(gd, batch * len, cout, Trans::N, w.data(), kc, cout, Trans::T, &mut dcol, false);
                    let dx = col2im(&dcol, batch, len, cin, *kernel, *pad_left);
                    out.push((node.inputs[0], Tensor::new(x.shape().to_vec(), dx).unwrap()));
                }
            }
            Op::LstmCell { hidden, gates, tanh_c } => {
                let h = *hidden;
                let g4 = 4 * h;
                let (x, state, w_ih, w_hh) = (inp(0), inp(1), inp(2), inp(3));
                let (batch, fin) = (x.shape()[0], x.shape()[1]);
                let sv = state.data();
                let mut dz = vec![T::zero(); batch * g4];
                let mut dstate = vec![T::zero(); batch * 2 * h];
                for bi in 0..batch {
                    let gr = &gates[bi * g4..(bi + 1) * g4];
                    let dzr = &mut dz[bi * g4..(bi + 1) * g4];
                    for j in 0..h {
                        let (ig, fg, cg, og) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                        let tc = tanh_c[bi * h + j];
                        let dh = gd[bi * 2 * h + j];
                        let dc = gd[bi * 2 * h + h + j] + dh * og * (T::one() - tc * tc);
                        let c_prev = sv[bi * 2 * h + h + j];
                        dzr[j] = dc * cg * ig * (T::one() - ig);
                        dzr[h + j] = dc * c_prev * fg * (T::one() - fg);
                        dzr[2 * h + j] = dc * ig * (T::one() - cg * cg);
                        dzr[3 * h + j] = dh * tc * og * (T::one() - og);
                        dstate[bi * 2 * h + h + j] = dc * fg;
                    }
                }
                if need[0] {
                    let mut dx = vec![T::zero(); batch * fin];
                    matmul(&dz, batch, g4, Trans::N, w_ih.data(), fin, g4, Trans::T, &mut dx, false);
                    out.push((node.inputs[0], Tensor::new(vec![batch, fin], dx).unwrap()));
                }
                if need[1] {
                    // dh_prev into the left half of each state row
                    T::gemm_raw(
                        batch, g4, h, T::one(), &dz, g4 as isize, 1,
                        w_hh.data(), 1, g4 as isize, T::zero(), &mut dstate, (2 * h) as isize, 1,
                    );
                    out.push((node.inputs[1], Tensor::new(vec![batch, 2 * h], dstate).unwrap()));
                }
                if need[2] {
                    let mut dw = vec![T::zero(); fin * g4];
                    matmul(x.data(), batch, fin, Trans::T, &dz, batch, g4, Trans::N, &mut dw, false);
                    out.push((node.inputs[2], Tensor::new(vec![fin, g4], dw).unwrap()));
                }
                if need[3] {
                    let mut dw = vec![T::zero(); h * g4];
                    T::gemm_raw(
                        h, batch, g4, T::one(), sv, 1, (2 * h) as isize,
                        &dz, g4 as isize, 1, T::zero(), &mut dw, g4 as isize, 1,
                    );
                    out.push((node.inputs[3], Tensor::new(vec![h, g4], dw).unwrap()));
                }
                if need[4] {
                    out.push((node.inputs[4], Tensor::new(vec![g4], col_sums(&dz, g4)).unwrap()));
                }
            }
            Op::BatchNorm { xhat, inv_std, batch_stats } => {
                let gamma = inp(1);
                let (batch, feat) = (inp(0).shape()[0], inp(0).shape()[1]);
                let mut sum_dy = vec![0.0f64; feat];
                let mut sum_dy_xhat = vec![0.0f64; feat];
                for bi in 0..batch {
                    for j in 0..feat {
                        let dy = gd[bi * feat + j].f64();
                        sum_dy[j] += dy;
                        sum_dy_xhat[j] += dy * xhat[bi * feat + j].f64();
                    }
                }
                if need[0] {
                    let mut dx = vec![T::zero(); batch * feat];
                    let nb = batch as f64;
                    for bi in 0..batch {
                        for j in 0..feat {
                            let gdx = gamma.data()[j].f64() * inv_std[j].f64();
                            let dy = gd[bi * feat + j].f64();
                            dx[bi * feat + j] = T::lit(if *batch_stats {
                                gdx * (dy - sum_dy[j] / nb - xhat[bi * feat + j].f64() * sum_dy_xhat[j] / nb)
                            } else {
                                gdx * dy
                            });
                        }
                    }
                    out.push((node.inputs[0], Tensor::new(vec![batch, feat], dx).unwrap()));
                }
                if need[1] {
                    out.push((node.inputs[1], Tensor::new(vec![feat], sum_dy_xhat.iter().map(|&v| T::lit(v)).collect()).unwrap()));
                }
                if need[2] {
                    out.push((node.inputs[2], Tensor::new(vec![feat], sum_dy.iter().map(|&v| T::lit(v)).collect()).unwrap()));
                }
            }
            Op::Dropout { mask } => {
                let d = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                out.push((node.inputs[0], Tensor::new(g.shape().to_vec(), d).unwrap()));
            }
            Op::Relu => {
                let d = gd.iter().zip(inp(0).data()).map(|(&a, &x)| if x > T::zero() { a } else { T::zero() }).collect();
                out.push((node.inputs[0], Tensor::new(g.shape().to_vec(), d).unwrap()));
            }
            Op::Selu => {
                let d = gd.iter().zip(inp(0).data()).map(|(&a, &x)| a * selu_grad(x)).collect();
                out.push((node.inputs[0], Tensor::new(g.shape().to_vec(), d).unwrap()));
            }
            Op::Softmax => {
                let y = node.value.data();
                let width = *g.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_mut(width).zip(y.chunks(width)).zip(gd.chunks(width)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| (a * b).f64()).sum();
                    let dot = T::lit(dot);
                    for ((o, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - dot);
                    }
                }
                out.push((node.inputs[0], Tensor::new(g.shape().to_vec(), d).unwrap()));
            }
            Op::SoftmaxCce { probs, labels } => {
                let m = probs.len() / labels.len().max(1);
                let scale = gd[0] / T::lit(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (bi, &l) in labels.iter().enumerate() {
                    d[bi * m + l] -= scale;
                }
                out.push((node.inputs[0], Tensor::new(vec![labels.len(), m], d).unwrap()));
            }
            Op::ColumnPool { mode, argmax } => {
                let xs = inp(0).shape();
                let (batch, len, ch) = (xs[0], xs[1], xs[2]);
                let mut d = vec![T::zero(); batch * len * ch];
                match mode {
                    PoolMode::Sum | PoolMode::Mean => {
                        let div = if *mode == PoolMode::Mean { T::lit(len as f64) } else { T::one() };
                        for bi in 0..batch {
                            let gr = &gd[bi * ch..(bi + 1) * ch];
                            for t in 0..len {
                                for (o, &gg) in d[(bi * len + t) * ch..(bi * len + t + 1) * ch].iter_mut().zip(gr) {
                                    *o = gg / div;
                                }
                            }
                        }
                    }
                    PoolMode::Max => {
                        for bi in 0..batch {
                            for c in 0..ch {
                                d[(bi * len + argmax[bi * ch + c]) * ch + c] = gd[bi * ch + c];
                            }
                        }
                    }
                }
                out.push((node.inputs[0], Tensor::new(xs.to_vec(), d).unwrap()));
            }
            Op::Concat { widths } => {
                let total: usize = widths.iter().sum();
                let rows = gd.len() / total.max(1);
                let mut offset = 0;
                for (k, &w) in widths.iter().enumerate() {
                    if need[k] {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        out.push((node.inputs[k], Tensor::new(inp(k).shape().to_vec(), d).unwrap()));
                    }
                    offset += w;
                }
            }
            Op::Slice { start } => {
                let xs = inp(0).shape();
                let width = *xs.last().unwrap();
                let len = *g.shape().last().unwrap();
                let rows = gd.len() / len.max(1);
                let mut d = vec![T::zero(); inp(0).numel()];
                for r in 0..rows {
                    d[r * width + start..r * width + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                out.push((node.inputs[0], Tensor::new(xs.to_vec(), d).unwrap()));
            }
            Op::Reshape => {
                out.push((node.inputs[0], Tensor::new(inp(0).shape().to_vec(), gd.to_vec()).unwrap()));
            }
            Op::Attention { probs, scale } => {
                let (q, k, v) = (inp(0), inp(1), inp(2));
                let (batch, sq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
                let (sk, dv) = (k.shape()[1], v.shape()[2]);
                let mut dq = vec![T::zero(); q.numel()];
                let mut dk = vec![T::zero(); k.numel()];
                let mut dvv = vec![T::zero(); v.numel()];
                let mut dp = vec![T::zero(); sq * sk];
                for bi in 0..batch {
                    let gb = &gd[bi * sq * dv..(bi + 1) * sq * dv];
                    let pb = &probs[bi * sq * sk..(bi + 1) * sq * sk];
                    let vb = &v.data()[bi * sk * dv..(bi + 1) * sk * dv];
                    let qb = &q.data()[bi * sq * d..(bi + 1) * sq * d];
                    let kb = &k.data()[bi * sk * d..(bi + 1) * sk * d];
                    matmul(pb, sq, sk, Trans::T, gb, sq, dv, Trans::N, &mut dvv[bi * sk * dv..(bi + 1) * sk * dv], false);
                    matmul(gb, sq, dv, Trans::N, vb, sk, dv, Trans::T, &mut dp, false);
                    // softmax backward, then the 1/sqrt(d) scale
                    for (dr, pr) in dp.chunks_mut(sk).zip(pb.chunks(sk)) {
                        let dot = T::lit(pr.iter().zip(dr.iter()).map(|(&a, &b)| (a * b).f64()).sum());
                        for (o, &p) in dr.iter_mut().zip(pr) {
                            *o = p * (*o - dot) * *scale;
                        }
                    }
                    matmul(&dp, sq, sk, Trans::N, kb, sk, d, Trans::N, &mut dq[bi * sq * d..(bi + 1) * sq * d], false);
                    matmul(&dp, sq, sk, Trans::T, qb, sq, d, Trans::N, &mut dk[bi * sk * d..(bi + 1) * sk * d], false);
                }
                if need[0] {
                    out.push((node.inputs[0], Tensor::new(q.shape().to_vec(), dq).unwrap()));
                }
                if need[1] {
                    out.push((node.inputs[1], Tensor::new(k.shape().to_vec(), dk).unwrap()));
                }
                if need[2] {
                    out.push((node.inputs[2], Tensor::new(v.shape().to_vec(), dvv).unwrap()));
                }
            }
            Op::Add => {
                for k in 0..2 {
                    if need[k] {
                        out.push((node.inputs[k], g.clone().with_grad(false)));
                    }
                }
            }
            Op::SumProduct { weights } => {
                let d = weights.iter().map(|&w| w * gd[0]).collect();
                out.push((node.inputs[0], Tensor::new(inp(0).shape().to_vec(), d).unwrap()));
            }
        }
        out
    }
}

pub fn selu<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::lit(SELU_SCALE) * x
    } else {
        T::lit(SELU_SCALE * SELU_ALPHA) * x.exp_m1()
    }
}

fn selu_grad<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::lit(SELU_SCALE)
    } else {
        T::lit(SELU_SCALE * SELU_ALPHA) * x.exp()
    }
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += v.f64();
    }
    let inv = T::lit(1.0 / total);
    row.iter_mut().for_each(|v| *v *= inv);
}

fn col_sums<T: Real>(m: &[T], cols: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; cols];
    for row in m.chunks(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v.f64();
        }
    }
    acc.into_iter().map(T::lit).collect()
}

/// `[B, L, C]` → `[B·L, K·C]` patch matrix with zero padding.
fn im2col<T: Real>(x: &[T], batch: usize, len: usize, ch: usize, kernel: usize, pad_left: usize) -> Vec<T> {
    let kc = kernel * ch;
    let mut col = vec![T::zero(); batch * len * kc];
    for bi in 0..batch {
        for t in 0..len {
            let dst = &mut col[(bi * len + t) * kc..(bi * len + t + 1) * kc];
            for k in 0..kernel {
                let src = t as isize + k as isize - pad_left as isize;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let s = (bi * len + src as usize) * ch;
                dst[k * ch..(k + 1) * ch].copy_from_slice(&x[s..s + ch]);
            }
        }
    }
    col
}

fn col2im<T: Real>(dcol: &[T], batch: usize, len: usize, ch: usize, kernel: usize, pad_left: usize) -> Vec<T> {
    let kc = kernel * ch;
    let mut dx = vec![T::zero(); batch * len * ch];
    for bi in 0..batch {
        for t in 0..len {
            let srcrow = &dcol[(bi * len + t) * kc..(bi * len + t + 1) * kc];
            for k in 0..kernel {
                let dst = t as isize + k as isize - pad_left as isize;
                if dst < 0 || dst >= len as isize {
                    continue;
                }
                let d = (bi * len + dst as usize) * ch;
                for (o, &v) in dx[d..d + ch].iter_mut().zip(&srcrow[k * ch..(k + 1) * ch]) {
                    *o += v;
                }
            }
        }
    }
    dx
}
