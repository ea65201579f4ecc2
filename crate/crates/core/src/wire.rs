//! Versioned binary tensor format used on the simulated client/server links.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SFCL" | version u8 = 1 | dtype u8 (1 = f32, 2 = f64) | rank u8
//!        | rank x u32 dims | payload (row-major IEEE-754) | crc32(payload) u32
//! ```
//!
//! A frame bundles several encoded tensors into one message: a `u32` part
//! count followed by `u32` length-prefixed parts.

use alloc::vec::Vec;

use crate::error::WireError;
use crate::tensor::{Real, Tensor};

pub const MAGIC: [u8; 4] = *b"SFCL";
pub const VERSION: u8 = 1;
const FIXED_HEADER: usize = 7;
const CRC_BYTES: usize = 4;

type WireResult<T> = core::result::Result<T, WireError>;

fn read_u32(bytes: &[u8], at: usize) -> WireResult<u32> {
    let end = at + 4;
    if bytes.len() < end {
        return Err(WireError::Truncated { needed: end, available: bytes.len() });
    }
    Ok(u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]))
}

pub fn encode<T: Real>(tensor: &Tensor<T>) -> WireResult<Vec<u8>> {
    let shape = tensor.shape();
    if shape.len() > u8::MAX as usize {
        return Err(WireError::Malformed("rank exceeds 255"));
    }
    let mut out = Vec::with_capacity(FIXED_HEADER + 4 * shape.len() + T::BYTES * tensor.len() + CRC_BYTES);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| WireError::Malformed("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    let start = out.len();
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Reads the dtype tag without decoding the payload.
pub fn peek_dtype(bytes: &[u8]) -> WireResult<u8> {
    if bytes.len() < FIXED_HEADER {
        return Err(WireError::Truncated { needed: FIXED_HEADER, available: bytes.len() });
    }
    if bytes[..4] != MAGIC {
        return Err(WireError::BadMagic);
    }
    if bytes[4] != VERSION {
        return Err(WireError::BadVersion(bytes[4]));
    }
    match bytes[5] {
        1 | 2 => Ok(bytes[5]),
        other => Err(WireError::BadDtype(other)),
    }
}

/// Decodes exactly one tensor; the slice must contain nothing else.
pub fn decode<T: Real>(bytes: &[u8]) -> WireResult<Tensor<T>> {
    let dtype = peek_dtype(bytes)?;
    if dtype != T::DTYPE {
        return Err(WireError::DtypeMismatch { expected: T::DTYPE, found: dtype });
    }
    let rank = bytes[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let d = read_u32(bytes, FIXED_HEADER + 4 * i)? as usize;
        count = count.checked_mul(d).ok_or(WireError::Malformed("element count overflows"))?;
        shape.push(d);
    }
    let start = FIXED_HEADER + 4 * rank;
    let payload = count.checked_mul(T::BYTES).ok_or(WireError::Malformed("payload size overflows"))?;
    let total = start
        .checked_add(payload)
        .and_then(|n| n.checked_add(CRC_BYTES))
        .ok_or(WireError::Malformed("payload size overflows"))?;
    if bytes.len() < total {
        return Err(WireError::Truncated { needed: total, available: bytes.len() });
    }
    if bytes.len() > total {
        return Err(WireError::Trailing);
    }
    let body = &bytes[start..start + payload];
    let stored = read_u32(bytes, start + payload)?;
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(WireError::Checksum { stored, computed });
    }
    let data = body.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::from_vec(&shape, data).map_err(|_| WireError::Malformed("shape/payload disagreement"))
}

pub fn encode_frame(parts: &[Vec<u8>]) -> WireResult<Vec<u8>> {
    let count = u32::try_from(parts.len()).map_err(|_| WireError::Malformed("too many parts"))?;
    let mut out = Vec::with_capacity(4 + parts.iter().map(|p| p.len() + 4).sum::<usize>());
    out.extend_from_slice(&count.to_le_bytes());
    for p in parts {
        let len = u32::try_from(p.len()).map_err(|_| WireError::Malformed("part too large"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(p);
    }
    Ok(out)
}

pub fn decode_frame(bytes: &[u8]) -> WireResult<Vec<&[u8]>> {
    let count = read_u32(bytes, 0)? as usize;
    let mut parts = Vec::new();
    let mut at = 4;
    for _ in 0..count {
        let len = read_u32(bytes, at)? as usize;
        at += 4;
        let end = at.checked_add(len).ok_or(WireError::Malformed("part length overflows"))?;
        if bytes.len() < end {
            return Err(WireError::Truncated { needed: end, available: bytes.len() });
        }
        parts.push(&bytes[at..end]);
        at = end;
    }
    if at != bytes.len() {
        return Err(WireError::Trailing);
    }
    Ok(parts)
}

/// Incremental reader over the parts of a decoded frame.
pub struct FrameReader<'a> {
    parts: Vec<&'a [u8]>,
    next: usize,
}

impl<'a> FrameReader<'a> {
    pub fn new(bytes: &'a [u8]) -> WireResult<Self> {
        Ok(Self { parts: decode_frame(bytes)?, next: 0 })
    }

    pub fn tensor<T: Real>(&mut self) -> WireResult<Tensor<T>> {
        let part = self.parts.get(self.next).ok_or(WireError::Malformed("frame has too few parts"))?;
        self.next += 1;
        decode(part)
    }

    pub fn scalar(&mut self) -> WireResult<f64> {
        let t = self.tensor::<f64>()?;
        if !t.shape().is_empty() {
            return Err(WireError::Malformed("expected a rank-0 tensor"));
        }
        Ok(t.data()[0])
    }

    pub fn finish(self) -> WireResult<()> {
        if self.next == self.parts.len() {
            Ok(())
        } else {
            Err(WireError::Malformed("frame has unread parts"))
        }
    }
}

/// Accumulates encoded parts for one frame.
#[derive(Default)]
pub struct FrameWriter {
    parts: Vec<Vec<u8>>,
}

impl FrameWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensor<T: Real>(&mut self, t: &Tensor<T>) -> WireResult<&mut Self> {
        self.parts.push(encode(t)?);
        Ok(self)
    }

    pub fn scalar(&mut self, v: f64) -> WireResult<&mut Self> {
        self.tensor(&Tensor::scalar(v))
    }

    pub fn finish(&self) -> WireResult<Vec<u8>> {
        encode_frame(&self.parts)
    }
}
