//! DTT tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes          | content                                   |
//! |----------------|-------------------------------------------|
//! | 8              | magic `DTTENSOR`                          |
//! | 1              | version (1)                               |
//! | 1              | dtype: 1 = f32, 2 = f64, 3 = u8           |
//! | 1              | ndim                                      |
//! | 4 × ndim       | extents, u32                              |
//! | rest           | row-major payload                         |

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 8] = b"DTTENSOR";
pub const VERSION: u8 = 1;

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(11 + 4 * t.ndim() + t.len() * T::DTYPE.width());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(u8::try_from(t.ndim()).expect("at most 255 axes"));
    for &e in t.shape() {
        out.extend_from_slice(&u32::try_from(e).expect("extent fits in u32").to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Parsed header: dtype, shape and payload offset.
fn parse_header(bytes: &[u8], path: &Path) -> Result<(DType, Vec<usize>, usize)> {
    if bytes.len() < 11 {
        return Err(Error::format(path, format!("header truncated: {} bytes", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format(path, "bad magic, not a DTT file"));
    }
    if bytes[8] != VERSION {
        return Err(Error::format(path, format!("unsupported DTT version {}", bytes[8])));
    }
    let dtype = DType::from_code(bytes[9])
        .ok_or_else(|| Error::format(path, format!("unknown dtype code {}", bytes[9])))?;
    let ndim = bytes[10] as usize;
    let header_len = 11 + 4 * ndim;
    if ndim == 0 || bytes.len() < header_len {
        return Err(Error::format(path, format!("truncated extents for {ndim} axes")));
    }
    let shape: Vec<usize> = bytes[11..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let expected = shape.iter().product::<usize>() * dtype.width();
    let actual = bytes.len() - header_len;
    if actual != expected {
        return Err(Error::format(
            path,
            format!("payload length mismatch: expected {expected} bytes, found {actual}"),
        ));
    }
    Ok((dtype, shape, header_len))
}

pub fn decode<T: Element>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let (dtype, shape, off) = parse_header(bytes, path)?;
    if dtype != T::DTYPE {
        return Err(Error::format(
            path,
            format!("dtype is {}, expected {}", dtype.name(), T::DTYPE.name()),
        ));
    }
    let data = bytes[off..].chunks_exact(dtype.width()).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn dtt_write<T: Element>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn dtt_read<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// A DTT tensor of whichever dtype the file holds.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
        }
    }
}

pub fn dtt_read_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dtype, _, _) = parse_header(&bytes, path)?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode(&bytes, path)?),
        DType::F64 => AnyTensor::F64(decode(&bytes, path)?),
        DType::U8 => AnyTensor::U8(decode(&bytes, path)?),
    })
}
