//! `SERT` tensor container.
//!
//! ```text
//! "SERT" | version u8 = 1 | dtype u8 = 1 (f32) | rank u8 | rank × u32 LE dims | f32 LE payload
//! ```
//! Row-major, no padding.

use std::fs;
use std::path::Path;

use emohead_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SERT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
/// Highest rank the in-memory tensor supports.
pub const MAX_RANK: usize = 3;

const FIXED_HEADER: usize = 7;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let dims = t.dims();
    let mut out = Vec::with_capacity(FIXED_HEADER + 4 * dims.len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let got = &bytes[..bytes.len().min(4)];
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(got))));
    }
    if bytes.len() < FIXED_HEADER {
        return Err(Error::Corruption(format!("header truncated at {} bytes", bytes.len())));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", bytes[5])));
    }
    let rank = bytes[6] as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {} exceeds {}", rank, MAX_RANK)));
    }
    let payload_at = FIXED_HEADER + 4 * rank;
    if bytes.len() < payload_at {
        return Err(Error::Corruption(format!("header declares rank {} but dims are truncated", rank)));
    }
    let dims: Vec<usize> =
        bytes[FIXED_HEADER..payload_at].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let expected = numel.and_then(|n| n.checked_mul(4));
    let payload = &bytes[payload_at..];
    if expected != Some(payload.len()) {
        return Err(Error::Corruption(format!(
            "dims {:?} need {} payload bytes, found {}",
            dims,
            expected.map_or_else(|| "overflowing".to_string(), |e| e.to_string()),
            payload.len()
        )));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::from_vec(&dims, data)?)
}

pub fn write_tensor(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {}", path.display(), m)),
        Error::Corruption(m) => Error::Corruption(format!("{}: {}", path.display(), m)),
        other => other,
    })
}
