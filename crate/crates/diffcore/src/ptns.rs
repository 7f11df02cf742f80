//! Portable tensor files.
//!
//! Layout: magic `PTNS`, one dtype byte (1 = f32, 2 = f64), one rank byte,
//! `rank` little-endian u32 dims, then the row-major little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{DiffError, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"PTNS";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.numel() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes a tensor of either stored precision, converting to `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let bad = |m: &str| DiffError::Format(m.to_string());
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing PTNS magic"));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| bad("unknown dtype code"))?;
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let n = numel(&dims);
    let width = dtype.size_of();
    let payload = &bytes[header..];
    if payload.len() != n * width {
        return Err(bad("payload length does not match dims"));
    }
    let data = payload
        .chunks_exact(width)
        .map(|c| match dtype {
            DType::F32 => T::lit(f32::read_le(c) as f64),
            DType::F64 => T::lit(f64::read_le(c)),
        })
        .collect();
    Tensor::new(dims, data)
}

pub fn write<T: Scalar, W: Write>(mut w: W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn read<T: Scalar, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode(&fs::read(path)?)
}
