//! `CAMCW001` parameter checkpoints.
//!
//! Layout: the 8-byte magic, then one record per entry until end of file:
//! `u16` name length, UTF-8 name, `u8` role, `u8` rank, `u32` per dim,
//! `f32` payload. Little-endian throughout.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{NumError, ParamSet, Role, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAMCW001";

pub fn write_params<W: Write>(params: &ParamSet<f32>, mut w: W) -> Result<(), NumError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| NumError::Checkpoint(format!("name too long: {}", p.name)))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[p.role as u8, p.value.rank() as u8])?;
        for &d in p.value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.numel() * 4);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumError> {
        if self.pos + n > self.buf.len() {
            return Err(NumError::Checkpoint(format!("truncated payload at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamSet<f32>, NumError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(NumError::Checkpoint("bad magic".into()));
    }
    let mut cur = Cursor { buf: &buf, pos: 8 };
    let mut params = ParamSet::new();
    while cur.pos < buf.len() {
        let n = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(n)?)
            .map_err(|_| NumError::Checkpoint("name is not UTF-8".into()))?
            .to_string();
        let hdr = cur.take(2)?;
        let role = Role::from_u8(hdr[0])
            .ok_or_else(|| NumError::Checkpoint(format!("unknown role {} for {name}", hdr[0])))?;
        let rank = hdr[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let data = cur
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(&name, role, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

pub fn save_params(params: &ParamSet<f32>, path: impl AsRef<Path>) -> Result<(), NumError> {
    let mut buf = Vec::new();
    write_params(params, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamSet<f32>, NumError> {
    read_params(fs::File::open(path)?)
}
