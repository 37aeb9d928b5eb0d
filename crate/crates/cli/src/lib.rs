//! Experiment harness: synthesis, training, evaluation, compression,
//! sweeps and plots, driven by one declarative config.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod pipeline;
pub mod plot;
pub mod stats;

use camc_core::compressor::CompressError;
use camc_core::numcore::NumError;
use camc_core::sigsynth::SigError;
use camc_core::splittrain::TrainError;
use camc_core::transport::TransportError;

pub use commands::{run, Cli};
pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("numeric divergence: {0}")]
    Diverged(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Transport(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Diverged(e.to_string()),
            TrainError::Config(m) => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Train(t) => t.into(),
            TransportError::Refused { reason: camc_core::transport::Reason::Diverged, detail } => {
                CliError::Diverged(detail)
            }
            other => CliError::Transport(other.to_string()),
        }
    }
}

impl From<SigError> for CliError {
    fn from(e: SigError) -> Self {
        match e {
            SigError::Config(m) => CliError::Config(m),
            SigError::UnknownModulation(_) => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<CompressError> for CliError {
    fn from(e: CompressError) -> Self {
        match e {
            CompressError::BadRatio(_)
            | CompressError::BadBits(_)
            | CompressError::BadLambda(_)
            | CompressError::LayerMismatch(_) => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<NumError> for CliError {
    fn from(e: NumError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
