//! HGT1 tensor files.
//!
//! Layout: magic `HGT1`, one dtype byte (1 = f32, 2 = f64), one rank byte,
//! `rank` little-endian u32 dimensions, then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{HgfeError, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"HGT1";

fn format_err(offset: usize, message: impl Into<String>) -> HgfeError {
    HgfeError::Format {
        offset,
        message: message.into(),
    }
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let rank =
        u8::try_from(t.rank()).map_err(|_| HgfeError::shape(format!("rank {} does not fit in one byte", t.rank())))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.numel() * t.dtype().size_bytes());
    out.extend_from_slice(MAGIC);
    out.push(t.dtype().code());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| HgfeError::shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "file shorter than the magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(
            0,
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4])),
        ));
    }
    let dtype_byte = *bytes.get(4).ok_or_else(|| format_err(4, "missing dtype byte"))?;
    let dtype =
        DType::from_code(dtype_byte).ok_or_else(|| format_err(4, format!("unknown dtype code {dtype_byte}")))?;
    let rank = *bytes.get(5).ok_or_else(|| format_err(5, "missing rank byte"))? as usize;

    let mut offset = 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = bytes
            .get(offset..offset + 4)
            .ok_or_else(|| format_err(bytes.len(), "truncated dimension list"))?;
        let d = u32::from_le_bytes(raw.try_into().expect("4-byte slice")) as usize;
        if d == 0 {
            return Err(format_err(offset, "zero-sized dimension"));
        }
        shape.push(d);
        offset += 4;
    }

    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(6, "element count overflows"))?;
    let width = dtype.size_bytes();
    let expected = numel
        .checked_mul(width)
        .and_then(|n| n.checked_add(offset))
        .ok_or_else(|| format_err(6, "payload size overflows"))?;
    if bytes.len() < expected {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes after payload"));
    }

    let payload = &bytes[offset..];
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    Tensor::with_dtype(&shape, data, dtype)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}
