use std::collections::BTreeSet;
use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Instant;

use super::frame::{Decoded, WireFrame};
use super::TransportError;

pub const BIND_ENV: &str = "CAMC_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:7878";

/// Server address from `CAMC_BIND`, or the default.
pub fn bind_addr() -> String {
    std::env::var(BIND_ENV).ok().filter(|s| !s.is_empty()).unwrap_or_else(|| DEFAULT_BIND.to_string())
}

/// A reliable-order byte pipe.
pub trait ByteLink {
    fn send(&mut self, bytes: &[u8]) -> Result<(), TransportError>;
    /// Append whatever arrives before `deadline` to `buf`. `Ok(false)` on
    /// timeout, `Err(Closed)` once the peer is gone.
    fn recv_some(&mut self, buf: &mut Vec<u8>, deadline: Instant) -> Result<bool, TransportError>;
}

/// What a receive attempt produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Incoming {
    Frame(WireFrame),
    /// A frame failed its CRC and was discarded.
    Corrupt,
    Timeout,
}

/// Frame-level wrapper over a byte pipe.
pub struct Endpoint<L: ByteLink> {
    pub link: L,
    buf: Vec<u8>,
}

impl<L: ByteLink> Endpoint<L> {
    pub fn new(link: L) -> Self {
        Endpoint { link, buf: Vec::new() }
    }

    pub fn send_frame(&mut self, f: &WireFrame) -> Result<(), TransportError> {
        self.link.send(&f.encode())
    }

    pub fn recv_frame(&mut self, deadline: Instant) -> Result<Incoming, TransportError> {
        loop {
            match WireFrame::decode(&self.buf)? {
                Decoded::Frame(f, n) => {
                    self.buf.drain(..n);
                    return Ok(Incoming::Frame(f));
                }
                Decoded::Corrupt(n) => {
                    self.buf.drain(..n);
                    return Ok(Incoming::Corrupt);
                }
                Decoded::Incomplete => {
                    if !self.link.recv_some(&mut self.buf, deadline)? {
                        return Ok(Incoming::Timeout);
                    }
                }
            }
        }
    }
}

pub struct TcpLink {
    stream: TcpStream,
    chunk: Vec<u8>,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        Ok(TcpLink { stream, chunk: vec![0; 1 << 16] })
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        TcpLink::new(TcpStream::connect(addr)?)
    }

    /// Accept one connection.
    pub fn accept(listener: &TcpListener) -> Result<Self, TransportError> {
        let (s, _) = listener.accept()?;
        TcpLink::new(s)
    }
}

impl ByteLink for TcpLink {
    fn send(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        self.stream.write_all(bytes).map_err(TransportError::from_io)
    }

    fn recv_some(&mut self, buf: &mut Vec<u8>, deadline: Instant) -> Result<bool, TransportError> {
        let now = Instant::now();
        if now >= deadline {
            return Ok(false);
        }
        self.stream.set_read_timeout(Some(deadline - now))?;
        match self.stream.read(&mut self.chunk) {
            Ok(0) => Err(TransportError::Closed),
            Ok(n) => {
                buf.extend_from_slice(&self.chunk[..n]);
                Ok(true)
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => Ok(false),
            Err(e) if e.kind() == ErrorKind::Interrupted => Ok(true),
            Err(e) => Err(TransportError::from_io(e)),
        }
    }
}

/// In-process pipe carrying one encoded frame per message. Outgoing
/// messages can be corrupted or the pipe cut to exercise recovery.
pub struct MemLink {
    tx: Option<Sender<Vec<u8>>>,
    rx: Receiver<Vec<u8>>,
    sent: usize,
    /// Indices (0-based, in send order) of messages to corrupt.
    pub corrupt: BTreeSet<usize>,
    /// Close the pipe after this many messages.
    pub cut_after: Option<usize>,
}

pub fn mem_pair() -> (MemLink, MemLink) {
    let (ta, ra) = channel();
    let (tb, rb) = channel();
    let mk = |tx, rx| MemLink { tx: Some(tx), rx, sent: 0, corrupt: BTreeSet::new(), cut_after: None };
    (mk(ta, rb), mk(tb, ra))
}

impl MemLink {
    pub fn sent(&self) -> usize {
        self.sent
    }
}

impl ByteLink for MemLink {
    fn send(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        if self.cut_after.is_some_and(|n| self.sent >= n) {
            self.tx = None;
        }
        let tx = self.tx.as_ref().ok_or(TransportError::Closed)?;
        let mut msg = bytes.to_vec();
        if self.corrupt.contains(&self.sent) {
            // flip a bit inside the checksum so framing stays intact
            let last = msg.len() - 1;
            msg[last] ^= 0x01;
        }
        self.sent += 1;
        tx.send(msg).map_err(|_| TransportError::Closed)
    }

    fn recv_some(&mut self, buf: &mut Vec<u8>, deadline: Instant) -> Result<bool, TransportError> {
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.rx.recv_timeout(wait) {
            Ok(m) => {
                buf.extend_from_slice(&m);
                Ok(true)
            }
            Err(RecvTimeoutError::Timeout) => Ok(false),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }
}
