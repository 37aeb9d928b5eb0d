//! Magnitude pruning, uniform affine quantization, compression ratios and
//! FLOPs accounting.

mod flops;
mod prune;
mod qfile;
mod quant;
mod ratio;

pub use flops::{flops_report, FlopsReport, FlopsRow};
pub use prune::{prune_layer, prune_model, prune_params, LayerSparsity, PruneOutcome, PruneSpec, SparsityReport};
pub use qfile::{load_quantized, read_quantized, save_quantized, write_quantized, QuantizedModel, SizeBreakdown, QUANT_MAGIC};
pub use quant::{dequantize, fake_quantize, quant_params, quantize_layer, QuantParams};
pub use ratio::{compression_ratio, layer_sizes, CompressionRatios};

#[derive(Debug, thiserror::Error)]
pub enum CompressError {
    #[error("pruning ratio {0} outside [0, 1)")]
    BadRatio(f64),
    #[error("bit width {0} outside 2..=16")]
    BadBits(u8),
    #[error("prune spec does not match the prunable layers: {0}")]
    LayerMismatch(String),
    #[error("cost factor λ = {0} outside (0, 1]")]
    BadLambda(f64),
    #[error("empty layer")]
    Empty,
    #[error("bad magic")]
    BadMagic,
    #[error("truncated payload at byte {0}")]
    Truncated(usize),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Num(#[from] crate::numcore::NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
