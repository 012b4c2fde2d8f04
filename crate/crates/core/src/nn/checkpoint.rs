//! Parameter container, little-endian:
//!
//! ```text
//! "CGP1" | u32 version (=1) | u32 tensor count
//!        | per tensor: u32 rank | rank * u32 dims | f64 values
//! ```
//!
//! Trainability flags are not stored; they are restored from the network
//! definition.

use std::fs;
use std::path::Path;

use super::{NnError, Params, Result, Sequential, Tensor};

pub const PARAMS_MAGIC: [u8; 4] = *b"CGP1";
const PARAMS_VERSION: u32 = 1;

pub fn encode_params(params: &Params) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 8 * params.scalar_count());
    buf.extend_from_slice(&PARAMS_MAGIC);
    buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for t in &params.tensors {
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                NnError::Truncated(format!(
                    "need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a parameter file and checks it against `net`'s layout.
pub fn decode_params(bytes: &[u8], net: &Sequential) -> Result<Params> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != PARAMS_MAGIC {
        return Err(NnError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != PARAMS_VERSION {
        return Err(NnError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let template = net.init_params(&mut crate::rng::seeded(0));
    if count != template.tensors.len() {
        return Err(NnError::DimMismatch(format!(
            "file has {count} tensors, network expects {}",
            template.tensors.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for expected in &template.tensors {
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape != expected.shape() {
            return Err(NnError::DimMismatch(format!(
                "tensor shape {shape:?}, network expects {:?}",
                expected.shape()
            )));
        }
        let payload = r.take(8 * expected.len())?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = expected.requires_grad;
        tensors.push(t);
    }
    if r.pos != bytes.len() {
        return Err(NnError::DimMismatch(format!(
            "{} trailing bytes after parameters",
            bytes.len() - r.pos
        )));
    }
    Ok(Params { tensors })
}

pub fn write_params(path: impl AsRef<Path>, params: &Params) -> Result<()> {
    fs::write(path, encode_params(params))?;
    Ok(())
}

pub fn read_params(path: impl AsRef<Path>, net: &Sequential) -> Result<Params> {
    decode_params(&fs::read(path)?, net)
}
