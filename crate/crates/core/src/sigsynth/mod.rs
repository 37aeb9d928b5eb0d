//! Modulated frame synthesis, the sensing channel, amplitude/phase
//! preprocessing and the CAMCDS01 dataset format.

mod channel;
mod corpus;
mod dataset;
mod modulation;

pub use channel::{apply_channel, iq_to_ap, phase_of, to_ap, ApFrame, ChannelSpec, Gain};
pub use corpus::{synth_dataset, synth_frame, ChannelRandomization, SynthSpec};
pub use dataset::{load_dataset, read_dataset, save_dataset, write_dataset, Dataset, Record, DATASET_MAGIC};
pub use modulation::{modulate_symbols, shape_symbols, slice_symbols, synthesize, CleanFrame, ModType, Pulse, SynthOptions};

#[derive(Debug, thiserror::Error)]
pub enum SigError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated payload at byte {at}")]
    Truncated { at: usize },
    #[error("L mismatch: expected frame length {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("label id {0} outside the label table")]
    BadLabel(u8),
    #[error("{0} trailing bytes after the last frame")]
    TrailingBytes(usize),
    #[error("unknown modulation {0:?}")]
    UnknownModulation(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
