use super::TransportError;

pub const PROTOCOL_VERSION: u8 = 1;
/// version, kind, step, payload length.
pub const HEADER_LEN: usize = 1 + 1 + 8 + 4;
pub const CRC_LEN: usize = 4;
/// Frames announcing more than this are treated as a broken stream.
pub const MAX_PAYLOAD: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    Embed = 1,
    Label = 2,
    Grad = 3,
    Ack = 4,
    Hello = 5,
    Bye = 6,
}

impl FrameKind {
    pub fn from_u8(v: u8) -> Option<FrameKind> {
        use FrameKind::*;
        [Embed, Label, Grad, Ack, Hello, Bye].into_iter().find(|k| *k as u8 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameKind::Embed => "EMBED",
            FrameKind::Label => "LABEL",
            FrameKind::Grad => "GRAD",
            FrameKind::Ack => "ACK",
            FrameKind::Hello => "HELLO",
            FrameKind::Bye => "BYE",
        }
    }

    /// Frames that are acknowledged and counted in the sequence.
    pub fn is_data(self) -> bool {
        matches!(self, FrameKind::Embed | FrameKind::Label | FrameKind::Grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireFrame {
    pub version: u8,
    pub kind: FrameKind,
    pub step: u64,
    pub payload: Vec<u8>,
}

/// Outcome of trying to cut one frame off the front of a byte buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    Frame(WireFrame, usize),
    /// CRC mismatch; the frame's bytes should be discarded.
    Corrupt(usize),
    Incomplete,
}

impl WireFrame {
    pub fn new(kind: FrameKind, step: u64, payload: Vec<u8>) -> Self {
        WireFrame { version: PROTOCOL_VERSION, kind, step, payload }
    }

    pub fn floats(kind: FrameKind, step: u64, values: &[f32]) -> Self {
        let mut payload = Vec::with_capacity(4 * values.len());
        values.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
        WireFrame::new(kind, step, payload)
    }

    pub fn ack(step: u64) -> Self {
        WireFrame::new(FrameKind::Ack, step, Vec::new())
    }

    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + CRC_LEN
    }

    /// Payload as `f32` values. Fails if the length is not a multiple of 4.
    pub fn values(&self) -> Result<Vec<f32>, TransportError> {
        if self.payload.len() % 4 != 0 {
            return Err(TransportError::Malformed(format!("{} payload of {} bytes", self.kind.name(), self.payload.len())));
        }
        Ok(self.payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.push(self.version);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Decoded, TransportError> {
        if buf.len() < HEADER_LEN {
            return Ok(Decoded::Incomplete);
        }
        let len = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD {
            return Err(TransportError::Malformed(format!("announced payload of {len} bytes")));
        }
        let total = HEADER_LEN + len + CRC_LEN;
        if buf.len() < total {
            return Ok(Decoded::Incomplete);
        }
        let crc = u32::from_le_bytes(buf[total - 4..total].try_into().unwrap());
        if crc32fast::hash(&buf[..total - 4]) != crc {
            return Ok(Decoded::Corrupt(total));
        }
        let kind = FrameKind::from_u8(buf[1]).ok_or_else(|| TransportError::Malformed(format!("unknown frame kind {}", buf[1])))?;
        let frame = WireFrame {
            version: buf[0],
            kind,
            step: u64::from_le_bytes(buf[2..10].try_into().unwrap()),
            payload: buf[HEADER_LEN..HEADER_LEN + len].to_vec(),
        };
        Ok(Decoded::Frame(frame, total))
    }

    /// Decode a byte stream holding whole frames back to back.
    pub fn decode_all(mut buf: &[u8]) -> Result<Vec<WireFrame>, TransportError> {
        let mut out = Vec::new();
        while !buf.is_empty() {
            match WireFrame::decode(buf)? {
                Decoded::Frame(f, n) => {
                    out.push(f);
                    buf = &buf[n..];
                }
                Decoded::Corrupt(_) => return Err(TransportError::Malformed("CRC mismatch".into())),
                Decoded::Incomplete => return Err(TransportError::Malformed(format!("{} trailing bytes", buf.len()))),
            }
        }
        Ok(out)
    }
}
