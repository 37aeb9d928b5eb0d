//! Dense tensors, reverse-mode differentiation and the layer primitives the
//! encoder and classifier are composed from.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
pub mod probes;
mod real;
pub mod rng;
mod tensor;

pub use checkpoint::{load_params, read_params, save_params, write_params, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, BlockError, GradCheckReport};
pub use graph::{
    selu, BatchStats, Graph, Mode, NodeId, OpKind, PoolMode, BN_EPS, CCE_FLOOR, SELU_ALPHA, SELU_SCALE,
};
pub use params::{layer_of, Param, ParamSet, Role};
pub use real::{matmul, sum_f64, Real, Trans};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward already ran on this graph; run a new forward pass first")]
    BackwardTwice,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
