//! Server-side modulation classifier.
//!
//! The noisy embedding is read as a length-N sequence of scalars:
//! Bi-LSTM(seq) → SELU → Dropout → Bi-LSTM(final states) → SELU →
//! N_A-head self-attention over the single vector → linear → Dense(SELU) →
//! BN → Dropout → Dense(M).

use rand::Rng;

use crate::nn::{glorot, insert_bn, orthogonal, Binder, BnUpdates};
use crate::numcore::rng::StreamRng;
use crate::numcore::{Graph, Mode, NodeId, NumError, ParamSet, Real, Role, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub embed_dim: usize,
    pub num_classes: usize,
    pub lstm_units: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub dense2: usize,
    pub dropout: f64,
}

impl McConfig {
    pub fn new(embed_dim: usize, num_classes: usize) -> Self {
        McConfig { embed_dim, num_classes, lstm_units: 64, heads: 8, head_dim: 16, dense2: 256, dropout: 0.5 }
    }

    /// Width of a Bi-LSTM output, `2·units`.
    pub fn bi_width(&self) -> usize {
        2 * self.lstm_units
    }

    pub fn validate(&self) -> Result<(), NumError> {
        if self.embed_dim == 0 || self.lstm_units == 0 || self.dense2 == 0 {
            return Err(NumError::Shape("classifier: embedding length, LSTM units and dense width must be positive".into()));
        }
        if self.num_classes < 1 {
            return Err(NumError::Shape("classifier: need at least one class".into()));
        }
        if self.heads * self.head_dim != self.bi_width() {
            return Err(NumError::Shape(format!(
                "classifier: heads × head_dim = {}×{} must equal the Bi-LSTM width {}",
                self.heads,
                self.head_dim,
                self.bi_width()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NumError::Shape(format!("classifier: dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn param_count(&self, with_stats: bool) -> usize {
        let h = self.lstm_units;
        let w = self.bi_width();
        let a = self.heads * self.head_dim;
        let lstm1 = 2 * (4 * h + 4 * h * h + 4 * h);
        let lstm2 = 2 * (4 * h * w + 4 * h * h + 4 * h);
        let att = 3 * w * a + a * w + w;
        let bn = if with_stats { 4 } else { 2 };
        let dense = (w * self.dense2 + self.dense2) + bn * self.dense2 + (self.dense2 * self.num_classes + self.num_classes);
        lstm1 + lstm2 + att + dense
    }
}

/// Layers holding prunable weight matrices, in forward order.
pub const MC_LAYERS: [&str; 5] = ["lstm1", "lstm2", "att", "dense2", "dense3"];

#[derive(Debug, Clone)]
pub struct McNet<T: Real = f32> {
    pub config: McConfig,
    pub params: ParamSet<T>,
}

/// One direction of a Bi-LSTM layer; `prefix` is e.g. `lstm1.fwd`.
fn insert_lstm<T: Real, R: Rng + ?Sized>(p: &mut ParamSet<T>, prefix: &str, fin: usize, h: usize, rng: &mut R) -> Result<(), NumError> {
    p.insert(&format!("{prefix}_ih"), Role::Weight, glorot(&[fin, 4 * h], fin, 4 * h, rng))?;
    p.insert(&format!("{prefix}_hh"), Role::Weight, orthogonal(h, 4 * h, rng))?;
    let mut bias = Tensor::zeros(&[4 * h]);
    bias.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = T::one());
    p.insert(&format!("{prefix}_bias"), Role::Bias, bias)
}

impl<T: Real> McNet<T> {
    pub fn build<R: Rng + ?Sized>(config: McConfig, rng: &mut R) -> Result<Self, NumError> {
        config.validate()?;
        let c = &config;
        let (h, w, a) = (c.lstm_units, c.bi_width(), c.heads * c.head_dim);
        let mut p = ParamSet::new();
        insert_lstm(&mut p, "lstm1.fwd", 1, h, rng)?;
        insert_lstm(&mut p, "lstm1.bwd", 1, h, rng)?;
        insert_lstm(&mut p, "lstm2.fwd", w, h, rng)?;
        insert_lstm(&mut p, "lstm2.bwd", w, h, rng)?;
        for name in ["att.wq", "att.wk", "att.wv"] {
            p.insert(name, Role::Weight, glorot(&[w, a], w, c.head_dim, rng))?;
        }
        p.insert("att.wo", Role::Weight, glorot(&[a, w], a, w, rng))?;
        p.insert("att.bo", Role::Bias, Tensor::zeros(&[w]))?;
        p.insert("dense2.w", Role::Weight, glorot(&[w, c.dense2], w, c.dense2, rng))?;
        p.insert("dense2.b", Role::Bias, Tensor::zeros(&[c.dense2]))?;
        insert_bn(&mut p, "bn3", c.dense2)?;
        p.insert("dense3.w", Role::Weight, glorot(&[c.dense2, c.num_classes], c.dense2, c.num_classes, rng))?;
        p.insert("dense3.b", Role::Bias, Tensor::zeros(&[c.num_classes]))?;
        Ok(McNet { config, params: p })
    }

    pub fn from_params(config: McConfig, params: ParamSet<T>) -> Result<Self, NumError> {
        let reference = McNet::<T>::build(config.clone(), &mut crate::numcore::rng::stream(0, "shape-probe"))?;
        crate::sscnet::check_same_layout(&reference.params, &params)?;
        Ok(McNet { config, params })
    }

    /// Append the classifier to `g`. `y` is `[B, N]`; the result is the
    /// `[B, M]` logits.
    pub fn forward(&self, g: &mut Graph<T>, y: NodeId, rng: &mut StreamRng, bn: &mut BnUpdates) -> Result<NodeId, NumError> {
        let c = &self.config;
        let s = g.shape(y).to_vec();
        if s.len() != 2 || s[1] != c.embed_dim {
            return Err(NumError::Shape(format!("classifier: input {s:?} but expected [batch, N={}]", c.embed_dim)));
        }
        let mut b = Binder::new(&self.params);
        let steps: Vec<NodeId> = (0..c.embed_dim).map(|i| g.slice(y, i, 1)).collect::<Result<_, _>>()?;

        let (fwd, bwd) = bilstm(g, &mut b, "lstm1.fwd", "lstm1.bwd", &steps)?;
        let mut seq = Vec::with_capacity(steps.len());
        for (hf, hb) in fwd.into_iter().zip(bwd) {
            let hcat = g.concat(&[hf, hb])?;
            let h = g.selu(hcat);
            seq.push(g.dropout(h, c.dropout, rng)?);
        }

        let (fwd, bwd) = bilstm(g, &mut b, "lstm2.fwd", "lstm2.bwd", &seq)?;
        let e = g.concat(&[*fwd.last().expect("nonempty"), bwd[0]])?;
        let e = g.selu(e);

        let r = multi_head(g, &mut b, e, c.heads, c.head_dim)?;
        let (wo, bo) = (b.get(g, "att.wo")?, b.get(g, "att.bo")?);
        let o = g.dense(r, wo, Some(bo))?;
        let d = b.dense(g, o, "dense2")?;
        let d = g.selu(d);
        let d = b.batch_norm(g, d, "bn3", bn)?;
        let d = g.dropout(d, c.dropout, rng)?;
        b.dense(g, d, "dense3")
    }

    /// Class probabilities `[B, M]` for a batch of embeddings `[B, N]`.
    pub fn classify(&self, y: &Tensor<T>, mode: Mode, rng: &mut StreamRng) -> Result<Tensor<T>, NumError> {
        let mut g = Graph::new(mode);
        let yi = g.input(y.clone().with_grad(false));
        let logits = self.forward(&mut g, yi, rng, &mut Vec::new())?;
        let p = g.softmax(logits);
        Ok(g.value(p).clone())
    }
}

/// Run one LSTM direction over `inputs`. The returned hidden states are
/// aligned with the input index whichever way the recursion runs.
pub fn run_lstm<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    prefix: &str,
    inputs: &[NodeId],
    reverse: bool,
) -> Result<Vec<NodeId>, NumError> {
    let w_ih = b.get(g, &format!("{prefix}_ih"))?;
    let w_hh = b.get(g, &format!("{prefix}_hh"))?;
    let bias = b.get(g, &format!("{prefix}_bias"))?;
    let hidden = g.shape(w_hh)[0];
    let batch = g.shape(inputs[0])[0];
    let mut state = g.input(Tensor::zeros(&[batch, 2 * hidden]));
    let mut hs = vec![state; inputs.len()];
    let order: Vec<usize> = if reverse { (0..inputs.len()).rev().collect() } else { (0..inputs.len()).collect() };
    for i in order {
        state = g.lstm_cell(inputs[i], state, w_ih, w_hh, bias)?;
        hs[i] = g.slice(state, 0, hidden)?;
    }
    Ok(hs)
}

/// Bidirectional LSTM; returns per-index forward and backward hidden states.
pub fn bilstm<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    fwd: &str,
    bwd: &str,
    inputs: &[NodeId],
) -> Result<(Vec<NodeId>, Vec<NodeId>), NumError> {
    if inputs.is_empty() {
        return Err(NumError::Shape("bilstm: empty input sequence".into()));
    }
    Ok((run_lstm(g, b, fwd, inputs, false)?, run_lstm(g, b, bwd, inputs, true)?))
}

fn multi_head<T: Real>(g: &mut Graph<T>, b: &mut Binder<'_, T>, e: NodeId, heads: usize, head_dim: usize) -> Result<NodeId, NumError> {
    let batch = g.shape(e)[0];
    let wq = b.get(g, "att.wq")?;
    let wk = b.get(g, "att.wk")?;
    let wv = b.get(g, "att.wv")?;
    let q = g.dense(e, wq, None)?;
    let k = g.dense(e, wk, None)?;
    let v = g.dense(e, wv, None)?;
    let mut outs = Vec::with_capacity(heads);
    for n in 0..heads {
        let mut part = |t: NodeId| -> Result<NodeId, NumError> {
            let s = g.slice(t, n * head_dim, head_dim)?;
            g.reshape(s, &[batch, 1, head_dim])
        };
        let (qn, kn, vn) = (part(q)?, part(k)?, part(v)?);
        let r = g.attention(qn, kn, vn)?;
        outs.push(g.reshape(r, &[batch, head_dim])?);
    }
    g.concat(&outs)
}

/// One attention head on a single `1×W` vector: `S-Att(e·W_Q, e·W_K, e·W_V)`.
pub fn attention_head<T: Real>(e: &Tensor<T>, w_q: &Tensor<T>, w_k: &Tensor<T>, w_v: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    let mut g = Graph::new(Mode::Infer);
    let ei = g.input(e.clone().reshaped(&[1, e.numel()])?);
    let (qi, ki, vi) = (g.input(w_q.clone()), g.input(w_k.clone()), g.input(w_v.clone()));
    let q = g.dense(ei, qi, None)?;
    let k = g.dense(ei, ki, None)?;
    let v = g.dense(ei, vi, None)?;
    let (dq, dv) = (g.shape(q)[1], g.shape(v)[1]);
    let q = g.reshape(q, &[1, 1, dq])?;
    let k = g.reshape(k, &[1, 1, dq])?;
    let v = g.reshape(v, &[1, 1, dv])?;
    let r = g.attention(q, k, v)?;
    g.value(r).clone().reshaped(&[dv])
}
