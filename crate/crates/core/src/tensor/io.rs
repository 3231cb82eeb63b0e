//! VMTB tensor files.
//!
//! Layout, all little-endian, no padding and no footer:
//!
//! | bytes | field                               |
//! |-------|-------------------------------------|
//! | 4     | magic `"VMTB"`                      |
//! | 4     | format version `u32` (= 1)          |
//! | 4     | dtype tag `u32` (0 = f32, 1 = f64)  |
//! | 4     | ndim `u32`                          |
//! | 8·n   | extents, `u64` each                 |
//! | …     | row-major scalar payload            |

use std::fs;
use std::path::Path;

use super::{DType, Result, Scalar, Tensor, TensorError, FORMAT_VERSION, MAGIC};

/// A tensor read from disk whose dtype is only known at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested precision.
    pub fn into_scalar<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.ndim() + T::DTYPE.size() * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE.tag().to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(TensorError::Truncated {
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Header {
    dtype: DType,
    shape: Vec<usize>,
    count: usize,
}

fn decode_header(cur: &mut Cursor<'_>) -> Result<Header> {
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(TensorError::BadMagic { found: magic });
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(TensorError::UnsupportedVersion(version));
    }
    let dtype = DType::from_tag(cur.u32()?)?;
    let ndim = cur.u32()? as usize;
    let mut extents = Vec::with_capacity(ndim.min(64));
    for _ in 0..ndim {
        extents.push(cur.u64()?);
    }
    let count = extents
        .iter()
        .try_fold(1usize, |acc, &e| {
            usize::try_from(e).ok().and_then(|e| acc.checked_mul(e))
        })
        .filter(|&c| c.checked_mul(dtype.size()).is_some())
        .ok_or_else(|| TensorError::ExtentOverflow(extents.clone()))?;
    let shape = extents.iter().map(|&e| e as usize).collect();
    Ok(Header {
        dtype,
        shape,
        count,
    })
}

fn decode_payload<T: Scalar>(cur: &mut Cursor<'_>, header: Header) -> Result<Tensor<T>> {
    let payload = cur.take(header.count * T::DTYPE.size())?;
    let trailing = cur.bytes.len() - cur.pos;
    if trailing != 0 {
        return Err(TensorError::TrailingBytes(trailing));
    }
    let data = payload
        .chunks_exact(T::DTYPE.size())
        .map(T::read_le)
        .collect();
    Tensor::new(header.shape, data)
}

/// Decodes a tensor of a statically known dtype.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let header = decode_header(&mut cur)?;
    if header.dtype != T::DTYPE {
        return Err(TensorError::DtypeMismatch {
            expected: T::DTYPE,
            found: header.dtype,
        });
    }
    decode_payload(&mut cur, header)
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_tensor(&fs::read(path)?)
}

/// Reads a tensor of either dtype.
pub fn read_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let header = decode_header(&mut cur)?;
    match header.dtype {
        DType::F32 => decode_payload(&mut cur, header).map(AnyTensor::F32),
        DType::F64 => decode_payload(&mut cur, header).map(AnyTensor::F64),
    }
}
