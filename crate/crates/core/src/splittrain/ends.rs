use crate::mcnet::McNet;
use crate::nn::{apply_bn_updates, BnUpdates};
use crate::numcore::rng::{stream, substream, StreamRng, DROPOUT_DEVICE, DROPOUT_SERVER};
use crate::numcore::{Graph, Mode, NodeId, Real, Tensor};
use crate::sscnet::SscNet;

use super::{Optimizer, OptimizerConfig, TrainError};

struct Pending<T: Real> {
    graph: Graph<T>,
    out: NodeId,
    bn: BnUpdates,
}

/// Encoder half. `forward` keeps the graph so that the gradient arriving
/// over the feedback channel can be back-propagated later.
pub struct DeviceEnd<T: Real = f32> {
    pub net: SscNet<T>,
    pub opt: Optimizer,
    pub(crate) dropout: StreamRng,
    pending: Option<Pending<T>>,
}

impl<T: Real> DeviceEnd<T> {
    pub fn new(net: SscNet<T>, opt: OptimizerConfig, seed: u64) -> Self {
        DeviceEnd { net, opt: Optimizer::new(opt), dropout: stream(seed, DROPOUT_DEVICE), pending: None }
    }

    /// Restart the dropout stream from `(seed, epoch)`.
    pub fn reseed(&mut self, seed: u64, epoch: u64) {
        self.dropout = substream(seed, DROPOUT_DEVICE, epoch);
    }

    /// Training-mode encoding of `x: [B, L, 2]`.
    pub fn forward(&mut self, x: Tensor<T>) -> Result<Tensor<T>, TrainError> {
        let mut graph = Graph::new(Mode::Train);
        let xi = graph.input(x.with_grad(false));
        let mut bn = Vec::new();
        let out = self.net.forward(&mut graph, xi, &mut self.dropout, &mut bn)?;
        let value = graph.value(out).clone();
        self.pending = Some(Pending { graph, out, bn });
        Ok(value)
    }

    /// Back-propagate `v ≈ ∂J/∂x_s` through the pending graph and update Θ.
    pub fn apply_gradient(&mut self, v: &Tensor<T>) -> Result<(), TrainError> {
        let Pending { mut graph, out, bn } = self.pending.take().ok_or(TrainError::NothingPending)?;
        graph.backward_with(out, v.clone())?;
        self.opt.step(&mut self.net.params, &graph.param_grads())?;
        apply_bn_updates(&mut self.net.params, &bn)?;
        Ok(())
    }

    /// Forget a pending forward pass (the step was abandoned).
    pub fn abort(&mut self) {
        self.pending = None;
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }
}

/// Result of one classifier update.
#[derive(Debug, Clone)]
pub struct ServerStep<T: Real = f32> {
    pub loss: f64,
    pub correct: usize,
    /// `u = ∂J/∂y`, shaped like the received embedding batch.
    pub grad: Tensor<T>,
}

/// Classifier half.
pub struct ServerEnd<T: Real = f32> {
    pub net: McNet<T>,
    pub opt: Optimizer,
    pub(crate) dropout: StreamRng,
    steps: u64,
}

impl<T: Real> ServerEnd<T> {
    pub fn new(net: McNet<T>, opt: OptimizerConfig, seed: u64) -> Self {
        ServerEnd { net, opt: Optimizer::new(opt), dropout: stream(seed, DROPOUT_SERVER), steps: 0 }
    }

    /// Restart the dropout stream from `(seed, epoch)`.
    pub fn reseed(&mut self, seed: u64, epoch: u64) {
        self.dropout = substream(seed, DROPOUT_SERVER, epoch);
    }

    /// Loss, exact update of Φ and the embedding gradient for one batch.
    /// A non-finite loss leaves Φ untouched.
    pub fn train_step(&mut self, y: &Tensor<T>, labels: &[usize]) -> Result<ServerStep<T>, TrainError> {
        if labels.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        self.steps += 1;
        let mut g = Graph::new(Mode::Train);
        let yi = g.input(y.clone().with_grad(true));
        let mut bn = Vec::new();
        let logits = self.net.forward(&mut g, yi, &mut self.dropout, &mut bn)?;
        let correct = count_correct(g.value(logits), labels);
        let loss_id = g.softmax_cce(logits, labels)?;
        let mut loss = g.value(loss_id).data()[0].f64();
        // the log floor would turn NaN probabilities into a finite loss
        if !g.value(logits).is_finite() {
            loss = f64::NAN;
        }
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step: self.steps, loss });
        }
        g.backward(loss_id)?;
        let grad = g.grad(yi).cloned().unwrap_or_else(|| Tensor::zeros(y.shape()));
        self.opt.step(&mut self.net.params, &g.param_grads())?;
        apply_bn_updates(&mut self.net.params, &bn)?;
        Ok(ServerStep { loss, correct, grad })
    }
}

pub(crate) fn count_correct<T: Real>(scores: &Tensor<T>, labels: &[usize]) -> usize {
    let m = scores.shape()[1];
    scores.data().chunks(m).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

pub(crate) fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
