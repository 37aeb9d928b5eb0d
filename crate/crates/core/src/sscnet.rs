//! Device-side spectrum-semantic encoder.
//!
//! Conv1D(64,8,ReLU) → Dropout → Conv1D(32,8,ReLU) → column-sum pool → BN →
//! Dense(N, SELU) → BN. Input is a batch of `L×2` amplitude/phase frames.

use rand::Rng;

use crate::nn::{glorot, insert_bn, Binder, BnUpdates};
use crate::numcore::rng::StreamRng;
use crate::numcore::{Graph, Mode, NodeId, NumError, ParamSet, PoolMode, Real, Role, Tensor};
use crate::sigsynth::ApFrame;

#[derive(Debug, Clone, PartialEq)]
pub struct SscConfig {
    pub frame_len: usize,
    pub embed_dim: usize,
    pub conv1_kernels: usize,
    pub conv1_len: usize,
    pub conv2_kernels: usize,
    pub conv2_len: usize,
    pub dropout: f64,
    /// Pooling over time; only `Sum` is used outside comparisons.
    pub pool: PoolMode,
}

impl SscConfig {
    pub fn new(frame_len: usize, embed_dim: usize) -> Self {
        SscConfig {
            frame_len,
            embed_dim,
            conv1_kernels: 64,
            conv1_len: 8,
            conv2_kernels: 32,
            conv2_len: 8,
            dropout: 0.5,
            pool: PoolMode::Sum,
        }
    }

    pub fn validate(&self) -> Result<(), NumError> {
        if self.embed_dim == 0 || self.frame_len == 0 {
            return Err(NumError::Shape("encoder: frame length and embedding dimension must be positive".into()));
        }
        if 2 * self.frame_len < self.embed_dim {
            return Err(NumError::Shape(format!(
                "encoder: compression rate 2L/N = {}/{} is below 1",
                2 * self.frame_len,
                self.embed_dim
            )));
        }
        if self.conv1_len == 0 || self.conv2_len == 0 || self.conv1_kernels == 0 || self.conv2_kernels == 0 {
            return Err(NumError::Shape("encoder: convolution sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NumError::Shape(format!("encoder: dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Compression rate `r = 2L/N`.
    pub fn compression_rate(&self) -> f64 {
        2.0 * self.frame_len as f64 / self.embed_dim as f64
    }

    /// Closed-form parameter count; running statistics included when
    /// `with_stats`.
    pub fn param_count(&self, with_stats: bool) -> usize {
        let (c1, c2, n) = (self.conv1_kernels, self.conv2_kernels, self.embed_dim);
        let bn = if with_stats { 4 } else { 2 };
        (2 * self.conv1_len * c1 + c1) + (c1 * self.conv2_len * c2 + c2) + bn * c2 + (c2 * n + n) + bn * n
    }

    /// Weight-matrix entries only (what pruning and quantization touch).
    pub fn weight_count(&self) -> usize {
        2 * self.conv1_len * self.conv1_kernels + self.conv1_kernels * self.conv2_len * self.conv2_kernels + self.conv2_kernels * self.embed_dim
    }
}

#[derive(Debug, Clone)]
pub struct SscNet<T: Real = f32> {
    pub config: SscConfig,
    pub params: ParamSet<T>,
}

/// Layers holding prunable weight matrices, in forward order.
pub const SSC_LAYERS: [&str; 3] = ["conv1", "conv2", "dense"];

impl<T: Real> SscNet<T> {
    pub fn build<R: Rng + ?Sized>(config: SscConfig, rng: &mut R) -> Result<Self, NumError> {
        config.validate()?;
        let c = &config;
        let mut p = ParamSet::new();
        p.insert("conv1.w", Role::Weight, glorot(&[c.conv1_len, 2, c.conv1_kernels], c.conv1_len * 2, c.conv1_len * c.conv1_kernels, rng))?;
        p.insert("conv1.b", Role::Bias, Tensor::zeros(&[c.conv1_kernels]))?;
        p.insert(
            "conv2.w",
            Role::Weight,
            glorot(&[c.conv2_len, c.conv1_kernels, c.conv2_kernels], c.conv2_len * c.conv1_kernels, c.conv2_len * c.conv2_kernels, rng),
        )?;
        p.insert("conv2.b", Role::Bias, Tensor::zeros(&[c.conv2_kernels]))?;
        insert_bn(&mut p, "bn1", c.conv2_kernels)?;
        p.insert("dense.w", Role::Weight, glorot(&[c.conv2_kernels, c.embed_dim], c.conv2_kernels, c.embed_dim, rng))?;
        p.insert("dense.b", Role::Bias, Tensor::zeros(&[c.embed_dim]))?;
        insert_bn(&mut p, "bn2", c.embed_dim)?;
        Ok(SscNet { config, params: p })
    }

    /// Reassemble from stored parameters, checking every expected shape.
    pub fn from_params(config: SscConfig, params: ParamSet<T>) -> Result<Self, NumError> {
        let reference = SscNet::<T>::build(config.clone(), &mut crate::numcore::rng::stream(0, "shape-probe"))?;
        check_same_layout(&reference.params, &params)?;
        Ok(SscNet { config, params })
    }

    /// Append the encoder to `g`. `x` is `[B, L, 2]`; the result is `[B, N]`.
    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, rng: &mut StreamRng, bn: &mut BnUpdates) -> Result<NodeId, NumError> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.config.frame_len || s[2] != 2 {
            return Err(NumError::Shape(format!(
                "encoder: input {s:?} but expected [batch, L={}, 2]",
                self.config.frame_len
            )));
        }
        let mut b = Binder::new(&self.params);
        let (w1, b1) = (b.get(g, "conv1.w")?, b.get(g, "conv1.b")?);
        let h = g.conv1d(x, w1, b1)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.config.dropout, rng)?;
        let (w2, b2) = (b.get(g, "conv2.w")?, b.get(g, "conv2.b")?);
        let h = g.conv1d(h, w2, b2)?;
        let h = g.relu(h);
        let h = g.column_pool(h, self.config.pool)?;
        let h = b.batch_norm(g, h, "bn1", bn)?;
        let h = b.dense(g, h, "dense")?;
        let h = g.selu(h);
        b.batch_norm(g, h, "bn2", bn)
    }

    /// Encode frames to `[B, N]` embeddings.
    pub fn encode(&self, frames: &[ApFrame], mode: Mode, rng: &mut StreamRng) -> Result<Tensor<T>, NumError> {
        self.encode_tensor(ap_batch(frames, self.config.frame_len)?, mode, rng)
    }

    /// Encode an already stacked `[B, L, 2]` batch.
    pub fn encode_tensor(&self, x: Tensor<T>, mode: Mode, rng: &mut StreamRng) -> Result<Tensor<T>, NumError> {
        let mut g = Graph::new(mode);
        let xi = g.input(x);
        let out = self.forward(&mut g, xi, rng, &mut Vec::new())?;
        Ok(g.value(out).clone())
    }
}

/// Stack A/P frames into a `[B, L, 2]` tensor.
pub fn ap_batch<T: Real>(frames: &[ApFrame], frame_len: usize) -> Result<Tensor<T>, NumError> {
    let mut data = Vec::with_capacity(frames.len() * frame_len * 2);
    for (i, f) in frames.iter().enumerate() {
        if f.len() != frame_len {
            return Err(NumError::Shape(format!("encoder: frame {i} has length {} but L = {frame_len}", f.len())));
        }
        data.extend(f.data.iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new(vec![frames.len(), frame_len, 2], data)
}

pub(crate) fn check_same_layout<T: Real>(reference: &ParamSet<T>, got: &ParamSet<T>) -> Result<(), NumError> {
    for p in reference.iter() {
        let q = got.get(&p.name)?;
        if q.value.shape() != p.value.shape() || q.role != p.role {
            return Err(NumError::Checkpoint(format!(
                "parameter {} has shape {:?} / role {:?}, expected {:?} / {:?}",
                p.name,
                q.value.shape(),
                q.role,
                p.value.shape(),
                p.role
            )));
        }
    }
    if got.len() != reference.len() {
        return Err(NumError::Checkpoint(format!("{} parameters stored, expected {}", got.len(), reference.len())));
    }
    Ok(())
}
