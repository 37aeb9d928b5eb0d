//! Joint training of encoder and classifier across a noisy link.
//!
//! The device end runs the encoder and applies whatever gradient comes back
//! over the feedback channel; the server end runs the classifier, computes
//! the loss and its exact gradient with respect to the received embedding.

mod adapt;
mod ends;
mod link;
mod offline;
mod optim;
mod report;

pub use adapt::{adapt, halve_with_zeros, AdaptConfig};
pub use ends::{DeviceEnd, ServerEnd, ServerStep};
pub use link::{add_awgn, noise_variance, LinkNoise, SimLink};
pub use offline::{
    epoch_order, evaluate, monolithic_step, offline_step, train_offline, EvalResult, Prepared, StepStats, TrainConfig,
};
pub use optim::{Optimizer, OptimizerConfig, Rule};
pub use report::{Confusion, EpochRecord, Split, TrainReport};

use crate::numcore::{NumError, CCE_FLOOR};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: u64, loss: f64 },
    #[error("no gradient is pending on the device; forward must precede apply")]
    NothingPending,
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mean categorical cross-entropy of probability rows against class
/// indices, with the log clamped at `p̂ ≥ 1e-12`.
pub fn cce_loss(probs: &[f64], num_classes: usize, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let total: f64 = probs
        .chunks(num_classes)
        .zip(labels)
        .map(|(row, &l)| -row[l].max(CCE_FLOOR).ln())
        .sum();
    total / labels.len() as f64
}
