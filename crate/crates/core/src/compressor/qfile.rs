//! `CAMCQ001` quantized checkpoints.
//!
//! Layout after the 8-byte magic: `u32` entry count, then per entry
//! `u16` name length, UTF-8 name, `u8` role, `u8` rank, `u32` per dim and
//! a `u8` kind. Kind 0 (quantized weight) continues with `u8` b, `f64` S,
//! `i32` Z, `u8` mask flag, the mask bitset when flagged (LSB first), `u32`
//! code count and the codes packed at `b` bits each, LSB first. Kind 1
//! (bias or batch-norm entry) continues with raw `f32` values.
//! Little-endian throughout.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::numcore::{ParamSet, Role, Tensor};

use super::quant::{dequantize, quantize_layer, QuantParams};
use super::CompressError;

pub const QUANT_MAGIC: &[u8; 8] = b"CAMCQ001";

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Codes { qp: QuantParams, mask: Option<Vec<bool>>, codes: Vec<u32> },
    Raw(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    body: Body,
}

/// A parameter set with every weight tensor stored as `b`-bit codes of its
/// kept entries.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    entries: Vec<Entry>,
}

/// Serialized-size accounting, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct SizeBreakdown {
    /// Magic, per-entry names, shapes and quantizer fields.
    pub header: usize,
    pub masks: usize,
    pub codes: usize,
    /// Biases and batch-norm entries kept as `f32`.
    pub side: usize,
    /// The weight tensors alone stored as dense `f32`.
    pub dense_weights: usize,
}

impl SizeBreakdown {
    pub fn total(&self) -> usize {
        self.header + self.masks + self.codes + self.side
    }

    /// Dense `f32` weights against the packed codes only.
    pub fn code_ratio(&self) -> f64 {
        self.dense_weights as f64 / self.codes.max(1) as f64
    }

    /// Dense `f32` weights against codes plus masks and headers.
    pub fn overall_ratio(&self) -> f64 {
        self.dense_weights as f64 / (self.header + self.masks + self.codes).max(1) as f64
    }
}

fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

fn pack(codes: &[u32], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut pos = 0usize;
    for &c in codes {
        for b in 0..bits as usize {
            if c >> b & 1 == 1 {
                out[(pos + b) / 8] |= 1 << ((pos + b) % 8);
            }
        }
        pos += bits as usize;
    }
    out
}

fn unpack(bytes: &[u8], count: usize, bits: u8) -> Vec<u32> {
    (0..count)
        .map(|i| {
            let pos = i * bits as usize;
            (0..bits as usize).fold(0u32, |acc, b| acc | (((bytes[(pos + b) / 8] >> ((pos + b) % 8)) & 1) as u32) << b)
        })
        .collect()
}

fn pack_mask(mask: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, _) in mask.iter().enumerate().filter(|(_, k)| **k) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

impl QuantizedModel {
    pub fn quantize(params: &ParamSet<f32>, bits: u8) -> Result<Self, CompressError> {
        let mut entries = Vec::with_capacity(params.len());
        for p in params.iter() {
            let body = if p.role == Role::Weight {
                let (codes, qp) = quantize_layer(p.value.data(), p.mask.as_deref(), bits)?;
                Body::Codes { qp, mask: p.mask.clone(), codes }
            } else {
                Body::Raw(p.value.data().to_vec())
            };
            entries.push(Entry { name: p.name.clone(), role: p.role, shape: p.value.shape().to_vec(), body });
        }
        Ok(QuantizedModel { entries })
    }

    /// Dequantized parameters; masks are restored on the weight tensors.
    pub fn to_params(&self) -> Result<ParamSet<f32>, CompressError> {
        let mut out = ParamSet::new();
        for e in &self.entries {
            let n: usize = e.shape.iter().product();
            let (data, mask) = match &e.body {
                Body::Codes { qp, mask, codes } => (dequantize(codes, qp, mask.as_deref(), n), mask.clone()),
                Body::Raw(v) => (v.clone(), None),
            };
            out.insert(&e.name, e.role, Tensor::new(e.shape.clone(), data)?)?;
            out.get_mut(&e.name)?.mask = mask;
        }
        Ok(out)
    }

    pub fn quant_params(&self) -> Vec<(&str, QuantParams)> {
        self.entries
            .iter()
            .filter_map(|e| match &e.body {
                Body::Codes { qp, .. } => Some((e.name.as_str(), *qp)),
                Body::Raw(_) => None,
            })
            .collect()
    }

    pub fn sizes(&self) -> SizeBreakdown {
        let mut s = SizeBreakdown { header: 8 + 4, ..Default::default() };
        for e in &self.entries {
            s.header += 2 + e.name.len() + 2 + 4 * e.shape.len() + 1;
            let n: usize = e.shape.iter().product();
            match &e.body {
                Body::Codes { qp, mask, codes } => {
                    s.header += 1 + 8 + 4 + 1 + 4;
                    s.masks += mask.as_ref().map_or(0, |m| m.len().div_ceil(8));
                    s.codes += packed_len(codes.len(), qp.bits);
                    s.dense_weights += 4 * n;
                }
                Body::Raw(v) => s.side += 4 * v.len(),
            }
        }
        s
    }
}

pub fn write_quantized<W: Write>(model: &QuantizedModel, mut w: W) -> Result<(), CompressError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(QUANT_MAGIC);
    buf.extend_from_slice(&(model.entries.len() as u32).to_le_bytes());
    for e in &model.entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| CompressError::Format(format!("name too long: {}", e.name)))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&[e.role as u8, e.shape.len() as u8]);
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &e.body {
            Body::Codes { qp, mask, codes } => {
                buf.push(0);
                buf.push(qp.bits);
                buf.extend_from_slice(&qp.scale.to_le_bytes());
                buf.extend_from_slice(&qp.zero_point.to_le_bytes());
                buf.push(mask.is_some() as u8);
                if let Some(m) = mask {
                    buf.extend_from_slice(&pack_mask(m));
                }
                buf.extend_from_slice(&(codes.len() as u32).to_le_bytes());
                buf.extend_from_slice(&pack(codes, qp.bits));
            }
            Body::Raw(v) => {
                buf.push(1);
                v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CompressError> {
        if n > self.buf.len() - self.pos {
            return Err(CompressError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CompressError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CompressError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_quantized<R: Read>(mut r: R) -> Result<QuantizedModel, CompressError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[..8] != QUANT_MAGIC {
        return Err(CompressError::BadMagic);
    }
    let mut cur = Cursor { buf: &buf, pos: 8 };
    let count = cur.u32()? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let n = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(n)?).map_err(|_| CompressError::Format("name is not UTF-8".into()))?.to_string();
        let role_byte = cur.u8()?;
        let role = Role::from_u8(role_byte).ok_or_else(|| CompressError::Format(format!("unknown role {role_byte} for {name}")))?;
        let rank = cur.u8()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let numel: usize = shape.iter().product();
        let body = match cur.u8()? {
            0 => {
                let bits = cur.u8()?;
                if !(2..=16).contains(&bits) {
                    return Err(CompressError::BadBits(bits));
                }
                let scale = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
                let zero_point = i32::from_le_bytes(cur.take(4)?.try_into().unwrap());
                let mask = match cur.u8()? {
                    0 => None,
                    1 => {
                        let bytes = cur.take(numel.div_ceil(8))?;
                        Some((0..numel).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect::<Vec<bool>>())
                    }
                    f => return Err(CompressError::Format(format!("bad mask flag {f} for {name}"))),
                };
                let kept = mask.as_ref().map_or(numel, |m| m.iter().filter(|&&k| k).count());
                let ncodes = cur.u32()? as usize;
                if ncodes != kept {
                    return Err(CompressError::Format(format!("{name}: {ncodes} codes for {kept} kept weights")));
                }
                let codes = unpack(cur.take(packed_len(ncodes, bits))?, ncodes, bits);
                let constant = scale == 1.0 && zero_point == 0 && codes.iter().all(|&c| c == 0);
                Body::Codes { qp: QuantParams { bits, scale, zero_point, constant }, mask, codes }
            }
            1 => Body::Raw(
                cur.take(numel.checked_mul(4).ok_or(CompressError::Truncated(cur.pos))?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            k => return Err(CompressError::Format(format!("unknown entry kind {k} for {name}"))),
        };
        entries.push(Entry { name, role, shape, body });
    }
    if cur.pos != buf.len() {
        return Err(CompressError::Format(format!("{} trailing bytes", buf.len() - cur.pos)));
    }
    Ok(QuantizedModel { entries })
}

pub fn save_quantized(model: &QuantizedModel, path: impl AsRef<Path>) -> Result<(), CompressError> {
    let mut buf = Vec::new();
    write_quantized(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel, CompressError> {
    read_quantized(fs::File::open(path)?)
}
