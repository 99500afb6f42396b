//! GTEN binary tensor files.
//!
//! Layout: `b"GTEN"`, version `u8` (= 1), dtype `u8` (0 = f32, 1 = f64),
//! ndim `u8`, one zero padding byte, `ndim` little-endian `u32` dims, then the
//! elements in row-major order, little-endian.

use std::fs;
use std::path::Path;

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GTEN";
pub const VERSION: u8 = 1;

/// A decoded tensor of whichever element type the file declared.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to the requested element type (exact when types agree).
    pub fn into_tensor<T: Element>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", t.rank())));
    }
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    out.push(0);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    Ok(out)
}

/// Decodes one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    let short = || Error::Format("truncated GTEN data".into());
    if bytes.len() < 8 {
        return Err(short());
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad GTEN magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!(
            "unsupported GTEN version {}",
            bytes[4]
        )));
    }
    let dtype = match bytes[5] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::Format(format!("unknown GTEN dtype {other}"))),
    };
    let ndim = bytes[6] as usize;
    let mut pos = 8;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let raw = bytes.get(pos..pos + 4).ok_or_else(short)?;
        shape.push(u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let size = dtype.size();
    let payload = bytes.get(pos..pos + n * size).ok_or_else(short)?;
    pos += n * size;
    let t = match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(
            shape,
            payload.chunks_exact(4).map(f32::read_le).collect(),
        )?),
        DType::F64 => AnyTensor::F64(Tensor::new(
            shape,
            payload.chunks_exact(8).map(f64::read_le).collect(),
        )?),
    };
    Ok((t, pos))
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after GTEN tensor",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub fn write<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
