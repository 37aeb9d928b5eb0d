use std::collections::VecDeque;
use std::time::{Duration, Instant};

use crate::splittrain::LinkNoise;

use super::frame::{FrameKind, WireFrame, PROTOCOL_VERSION};
use super::link::{ByteLink, Endpoint, Incoming};
use super::TransportError;

/// BYE reason codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Reason {
    Done = 0,
    VersionMismatch = 1,
    DimMismatch = 2,
    ConfigMismatch = 3,
    ProtocolError = 4,
    Diverged = 5,
}

impl Reason {
    pub fn from_u8(v: u8) -> Reason {
        match v {
            0 => Reason::Done,
            1 => Reason::VersionMismatch,
            2 => Reason::DimMismatch,
            3 => Reason::ConfigMismatch,
            5 => Reason::Diverged,
            _ => Reason::ProtocolError,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Reason::Done => "DONE",
            Reason::VersionMismatch => "VERSION_MISMATCH",
            Reason::DimMismatch => "DIM_MISMATCH",
            Reason::ConfigMismatch => "CONFIG_MISMATCH",
            Reason::ProtocolError => "PROTOCOL_ERROR",
            Reason::Diverged => "DIVERGED",
        }
    }
}

impl std::fmt::Display for Reason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

/// What both ends must agree on. Carried by HELLO as `u32` N, `u32` M,
/// `u32` batch, `f64` forward SNR, `f64` backward SNR, `u64` noise seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    pub embed_dim: usize,
    pub num_classes: usize,
    pub batch: usize,
    pub noise: LinkNoise,
    pub seed: u64,
}

const HELLO_LEN: usize = 4 + 4 + 4 + 8 + 8 + 8;

impl SessionConfig {
    pub fn to_payload(&self) -> Vec<u8> {
        let mut p = Vec::with_capacity(HELLO_LEN);
        p.extend_from_slice(&(self.embed_dim as u32).to_le_bytes());
        p.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        p.extend_from_slice(&(self.batch as u32).to_le_bytes());
        p.extend_from_slice(&self.noise.fwd_snr_db.to_le_bytes());
        p.extend_from_slice(&self.noise.bwd_snr_db.to_le_bytes());
        p.extend_from_slice(&self.seed.to_le_bytes());
        p
    }

    pub fn from_payload(p: &[u8]) -> Result<Self, TransportError> {
        if p.len() != HELLO_LEN {
            return Err(TransportError::Malformed(format!("HELLO payload of {} bytes", p.len())));
        }
        let u32_at = |i: usize| u32::from_le_bytes(p[i..i + 4].try_into().unwrap()) as usize;
        let f64_at = |i: usize| f64::from_le_bytes(p[i..i + 8].try_into().unwrap());
        Ok(SessionConfig {
            embed_dim: u32_at(0),
            num_classes: u32_at(4),
            batch: u32_at(8),
            noise: LinkNoise::new(f64_at(12), f64_at(20)),
            seed: u64::from_le_bytes(p[28..36].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Device,
    Server,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub config: SessionConfig,
    pub role: Role,
    /// Training steps whose full EMBED/LABEL/GRAD exchange completed.
    pub last_committed: u64,
    pub established: bool,
    /// Sequence number of the last data frame sent.
    pub sent_seq: u64,
    /// Sequence number of the last data frame accepted.
    pub recv_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timeouts {
    /// Wait for an ACK before the single retry.
    pub ack: Duration,
    /// Wait for the peer's next data frame.
    pub idle: Duration,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts { ack: Duration::from_millis(500), idle: Duration::from_secs(120) }
    }
}

/// One end of a session. Data frames carry a per-direction sequence
/// number in the step field and are acknowledged one at a time.
pub struct Peer<L: ByteLink> {
    pub ep: Endpoint<L>,
    pub state: SessionState,
    pub timeouts: Timeouts,
    /// Data frames handed to the caller, for exactly-once accounting.
    pub accepted: u64,
    /// Next-in-sequence frames that arrived while an ACK was awaited.
    backlog: VecDeque<WireFrame>,
}

fn bye(reason: Reason, detail: &str) -> WireFrame {
    let mut p = vec![reason as u8];
    p.extend_from_slice(detail.as_bytes());
    WireFrame::new(FrameKind::Bye, 0, p)
}

fn refused(f: &WireFrame) -> TransportError {
    let reason = f.payload.first().map_or(Reason::ProtocolError, |&b| Reason::from_u8(b));
    let detail = String::from_utf8_lossy(f.payload.get(1..).unwrap_or_default()).into_owned();
    TransportError::Refused { reason, detail }
}

impl<L: ByteLink> Peer<L> {
    fn new(link: L, config: SessionConfig, role: Role, timeouts: Timeouts) -> Self {
        Peer {
            ep: Endpoint::new(link),
            state: SessionState { config, role, last_committed: 0, established: false, sent_seq: 0, recv_seq: 0 },
            timeouts,
            accepted: 0,
            backlog: VecDeque::new(),
        }
    }

    /// Device side: send HELLO and wait for the server's HELLO or BYE.
    pub fn connect(link: L, config: SessionConfig, timeouts: Timeouts) -> Result<Self, TransportError> {
        let mut p = Peer::new(link, config, Role::Device, timeouts);
        let hello = WireFrame::new(FrameKind::Hello, 0, config.to_payload());
        for _attempt in 0..2 {
            p.ep.send_frame(&hello)?;
            let deadline = Instant::now() + timeouts.idle.min(Duration::from_secs(30));
            loop {
                match p.ep.recv_frame(deadline)? {
                    Incoming::Frame(f) if f.kind == FrameKind::Hello => {
                        let theirs = SessionConfig::from_payload(&f.payload)?;
                        if theirs != config {
                            let _ = p.ep.send_frame(&bye(Reason::ConfigMismatch, "server echoed a different config"));
                            return Err(TransportError::Refused { reason: Reason::ConfigMismatch, detail: format!("{theirs:?}") });
                        }
                        p.state.established = true;
                        return Ok(p);
                    }
                    Incoming::Frame(f) if f.kind == FrameKind::Bye => return Err(refused(&f)),
                    Incoming::Frame(_) => continue,
                    Incoming::Corrupt | Incoming::Timeout => break,
                }
            }
        }
        Err(TransportError::Timeout("handshake".into()))
    }

    /// Server side: wait for HELLO and check it against `expected`.
    pub fn accept(link: L, expected: SessionConfig, timeouts: Timeouts) -> Result<Self, TransportError> {
        let mut p = Peer::new(link, expected, Role::Server, timeouts);
        let deadline = Instant::now() + timeouts.idle;
        loop {
            let f = match p.ep.recv_frame(deadline)? {
                Incoming::Frame(f) => f,
                Incoming::Corrupt => continue,
                Incoming::Timeout => return Err(TransportError::Timeout("handshake".into())),
            };
            if f.kind != FrameKind::Hello {
                continue;
            }
            if f.version != PROTOCOL_VERSION {
                let detail = format!("peer speaks version {}, this end {PROTOCOL_VERSION}", f.version);
                p.ep.send_frame(&bye(Reason::VersionMismatch, &detail))?;
                return Err(TransportError::Refused { reason: Reason::VersionMismatch, detail });
            }
            let theirs = SessionConfig::from_payload(&f.payload)?;
            let (reason, detail) = if theirs.embed_dim != expected.embed_dim || theirs.num_classes != expected.num_classes {
                (
                    Reason::DimMismatch,
                    format!("N={} M={} offered, N={} M={} expected", theirs.embed_dim, theirs.num_classes, expected.embed_dim, expected.num_classes),
                )
            } else if theirs != expected {
                (Reason::ConfigMismatch, format!("offered {theirs:?}, expected {expected:?}"))
            } else {
                p.ep.send_frame(&WireFrame::new(FrameKind::Hello, 0, expected.to_payload()))?;
                p.state.established = true;
                return Ok(p);
            };
            p.ep.send_frame(&bye(reason, &detail))?;
            return Err(TransportError::Refused { reason, detail });
        }
    }

    fn check_len(&mut self, f: &WireFrame) -> Result<(), TransportError> {
        let c = &self.state.config;
        let want = match f.kind {
            FrameKind::Embed | FrameKind::Grad => 4 * c.embed_dim,
            FrameKind::Label => 4 * c.num_classes,
            _ => return Ok(()),
        };
        if f.payload.len() != want {
            let detail = format!("{} carries {} bytes, expected {want}", f.kind.name(), f.payload.len());
            let _ = self.ep.send_frame(&bye(Reason::DimMismatch, &detail));
            return Err(TransportError::Refused { reason: Reason::DimMismatch, detail });
        }
        Ok(())
    }

    /// Handle a data frame that is not the next in sequence: re-ACK a
    /// duplicate, reject anything ahead by echoing the last accepted number.
    fn stray_data(&mut self, f: &WireFrame) -> Result<(), TransportError> {
        if f.step <= self.state.recv_seq {
            self.ep.send_frame(&WireFrame::ack(f.step))
        } else {
            log::warn!("out-of-order {} {} (expected {}); rejected", f.kind.name(), f.step, self.state.recv_seq + 1);
            self.ep.send_frame(&WireFrame::ack(self.state.recv_seq))
        }
    }

    /// Send one data frame and wait for its ACK, retrying once.
    pub fn send_data(&mut self, kind: FrameKind, values: &[f32]) -> Result<(), TransportError> {
        let seq = self.state.sent_seq + 1;
        let frame = WireFrame::floats(kind, seq, values);
        for attempt in 0..2 {
            if attempt > 0 {
                log::debug!("no ACK for {} {seq}; retrying", kind.name());
            }
            self.ep.send_frame(&frame)?;
            let deadline = Instant::now() + self.timeouts.ack;
            loop {
                match self.ep.recv_frame(deadline)? {
                    Incoming::Frame(f) => match f.kind {
                        FrameKind::Ack if f.step == seq => {
                            self.state.sent_seq = seq;
                            return Ok(());
                        }
                        FrameKind::Ack => {
                            return Err(TransportError::OutOfOrder { sent: seq, acked: f.step });
                        }
                        FrameKind::Bye => return Err(refused(&f)),
                        // the peer moved on, so it has what we sent; our
                        // ACK must have been lost and a retry will follow
                        k if k.is_data() && f.step == self.state.recv_seq + 1 && self.backlog.is_empty() => {
                            self.backlog.push_back(f)
                        }
                        k if k.is_data() => self.stray_data(&f)?,
                        _ => {}
                    },
                    Incoming::Corrupt => {}
                    Incoming::Timeout => break,
                }
            }
        }
        Err(TransportError::Timeout(format!("ACK for {} {seq}", kind.name())))
    }

    /// Wait for the next data frame, ACK it and return its kind and values.
    /// HELLO replays and stale ACKs are ignored.
    pub fn recv_data(&mut self) -> Result<(FrameKind, Vec<f32>), TransportError> {
        let deadline = Instant::now() + self.timeouts.idle;
        loop {
            let f = match self.backlog.pop_front() {
                Some(f) => f,
                None => match self.ep.recv_frame(deadline)? {
                    Incoming::Frame(f) => f,
                    Incoming::Corrupt => continue,
                    Incoming::Timeout => return Err(TransportError::Timeout("waiting for data".into())),
                },
            };
            match f.kind {
                FrameKind::Bye => return Err(refused(&f)),
                FrameKind::Hello | FrameKind::Ack => continue,
                _ if f.step != self.state.recv_seq + 1 => self.stray_data(&f)?,
                _ => {
                    self.check_len(&f)?;
                    let values = f.values()?;
                    self.state.recv_seq = f.step;
                    self.accepted += 1;
                    self.ep.send_frame(&WireFrame::ack(f.step))?;
                    return Ok((f.kind, values));
                }
            }
        }
    }

    pub fn close(&mut self, reason: Reason, detail: &str) {
        let _ = self.ep.send_frame(&bye(reason, detail));
    }
}
