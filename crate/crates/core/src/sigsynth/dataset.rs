use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::SigError;

pub const DATASET_MAGIC: &[u8; 8] = b"CAMCDS01";

/// One stored frame: `2·L` interleaved I/Q values, a label index into the
/// dataset's label table and the sensing SNR in whole dB.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub iq: Vec<f32>,
    pub label: u8,
    pub snr_db: i16,
}

impl Record {
    fn bit_eq(&self, other: &Record) -> bool {
        self.label == other.label
            && self.snr_db == other.snr_db
            && self.iq.len() == other.iq.len()
            && self.iq.iter().zip(&other.iq).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// In-memory CAMCDS01 dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frame_len: usize,
    pub labels: Vec<String>,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(frame_len: usize, labels: Vec<String>) -> Self {
        Dataset { frame_len, labels, records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn push(&mut self, r: Record) -> Result<(), SigError> {
        if r.iq.len() != 2 * self.frame_len {
            return Err(SigError::LengthMismatch { expected: self.frame_len, found: r.iq.len() / 2 });
        }
        if r.label as usize >= self.labels.len() {
            return Err(SigError::BadLabel(r.label));
        }
        self.records.push(r);
        Ok(())
    }

    /// Bit-level equality (distinguishes NaN payloads and signed zeros).
    pub fn bit_eq(&self, other: &Dataset) -> bool {
        self.frame_len == other.frame_len
            && self.labels == other.labels
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.bit_eq(b))
    }

    /// Per-class frame counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.labels.len()];
        for r in &self.records {
            c[r.label as usize] += 1;
        }
        c
    }

    /// Subset by record index, preserving the header.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            frame_len: self.frame_len,
            labels: self.labels.clone(),
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Fail unless frames have length `expected`.
    pub fn expect_len(&self, expected: usize) -> Result<(), SigError> {
        if self.frame_len != expected {
            return Err(SigError::LengthMismatch { expected, found: self.frame_len });
        }
        Ok(())
    }
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<(), SigError> {
    let mut buf = Vec::with_capacity(32 + ds.records.len() * (8 * ds.frame_len + 3));
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&u32::try_from(ds.frame_len).map_err(|_| SigError::Config("frame length exceeds u32".into()))?.to_le_bytes());
    buf.extend_from_slice(&(ds.labels.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.records.len() as u64).to_le_bytes());
    for name in &ds.labels {
        let bytes = name.as_bytes();
        let n = u8::try_from(bytes.len()).map_err(|_| SigError::Config(format!("label name too long: {name}")))?;
        buf.push(n);
        buf.extend_from_slice(bytes);
    }
    for r in &ds.records {
        if r.iq.len() != 2 * ds.frame_len {
            return Err(SigError::LengthMismatch { expected: ds.frame_len, found: r.iq.len() / 2 });
        }
        for v in &r.iq {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(r.label);
        buf.extend_from_slice(&r.snr_db.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SigError> {
        if self.bytes.len() - self.pos < n {
            return Err(SigError::Truncated { at: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const K: usize>(&mut self) -> Result<[u8; K], SigError> {
        Ok(self.take(K)?.try_into().expect("length checked"))
    }
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset, SigError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<Dataset, SigError> {
    if bytes.len() < 8 || &bytes[..8] != DATASET_MAGIC {
        return Err(SigError::BadMagic);
    }
    let mut c = Cursor { bytes, pos: 8 };
    let frame_len = u32::from_le_bytes(c.array()?) as usize;
    let m = u32::from_le_bytes(c.array()?) as usize;
    let count = u64::from_le_bytes(c.array()?);
    let mut labels = Vec::with_capacity(m.min(256));
    for _ in 0..m {
        let n = c.take(1)?[0] as usize;
        let name = std::str::from_utf8(c.take(n)?).map_err(|_| SigError::Config("label name is not UTF-8".into()))?;
        labels.push(name.to_string());
    }
    let rec_bytes = 8 * frame_len + 3;
    let remaining = (bytes.len() - c.pos) as u64;
    if count.saturating_mul(rec_bytes as u64) > remaining {
        return Err(SigError::Truncated { at: bytes.len() });
    }
    let mut ds = Dataset::new(frame_len, labels);
    ds.records.reserve(count as usize);
    for _ in 0..count {
        let payload = c.take(8 * frame_len)?;
        let iq = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let label = c.take(1)?[0];
        let snr_db = i16::from_le_bytes(c.array()?);
        if label as usize >= m {
            return Err(SigError::BadLabel(label));
        }
        ds.records.push(Record { iq, label, snr_db });
    }
    if c.pos != bytes.len() {
        return Err(SigError::TrailingBytes(bytes.len() - c.pos));
    }
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), SigError> {
    let mut bytes = Vec::new();
    write_dataset(ds, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, SigError> {
    parse(&fs::read(path)?)
}
