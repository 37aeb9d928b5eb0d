//! Framed wire protocol between the device end and the server end.
//!
//! Frame layout, little-endian: `u8` version, `u8` kind, `u64` step, `u32`
//! payload length, payload, CRC-32 of everything before it. EMBED, LABEL
//! and GRAD frames carry `f32` values and a per-direction sequence number
//! in the step field; each is acknowledged before the next is sent. Link
//! noise is added by the receiver after decoding, never to wire bytes.

mod frame;
mod link;
mod online;
mod session;

pub use frame::{Decoded, FrameKind, WireFrame, CRC_LEN, HEADER_LEN, MAX_PAYLOAD, PROTOCOL_VERSION};
pub use link::{bind_addr, mem_pair, ByteLink, Endpoint, Incoming, MemLink, TcpLink, BIND_ENV, DEFAULT_BIND};
pub use online::{device_step, offline_mirror, run_device, serve, DeviceSummary, ServeSummary};
pub use session::{Peer, Reason, Role, SessionConfig, SessionState, Timeouts};

use crate::splittrain::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("connection closed by peer")]
    Closed,
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("session refused: {reason}: {detail}")]
    Refused { reason: Reason, detail: String },
    #[error("out-of-order ACK: sent {sent}, peer acknowledged {acked}")]
    OutOfOrder { sent: u64, acked: u64 },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(std::io::Error),
}

impl TransportError {
    pub fn from_io(e: std::io::Error) -> Self {
        use std::io::ErrorKind::*;
        match e.kind() {
            ConnectionReset | ConnectionAborted | BrokenPipe | UnexpectedEof => TransportError::Closed,
            _ => TransportError::Io(e),
        }
    }

    /// The peer said goodbye normally.
    pub fn is_done(&self) -> bool {
        matches!(self, TransportError::Refused { reason: Reason::Done, .. })
    }
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        TransportError::from_io(e)
    }
}
