//! `.pfts` tensor files: `b"PFTS"`, u16 version, u8 dtype code, u8 rank,
//! rank x u32 dims, then the row-major little-endian payload. No padding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: [u8; 4] = *b"PFTS";
pub const VERSION: u16 = 1;

/// A tensor of either supported dtype, as read from a file.
#[derive(Clone, Debug, PartialEq)]
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

    /// The tensor as `F`, failing if it was stored with another dtype.
    pub fn expect<F: Element>(self) -> Result<Tensor<F>> {
        let found = self.dtype();
        if found != F::DTYPE {
            return Err(Error::DtypeMismatch {
                expected: F::DTYPE.name(),
                found: found.name(),
            });
        }
        Ok(match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        })
    }

    /// The tensor converted to `F` whatever its stored dtype.
    pub fn convert<F: Element>(self) -> Tensor<F> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor<F: Element>(t: &Tensor<F>) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "rank exceeds 255".into(),
        });
    }
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + t.numel() * F::DTYPE.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(F::DTYPE.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "axis length exceeds u32".into(),
        })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn write_tensor<W: Write, F: Element>(w: &mut W, t: &Tensor<F>) -> Result<()> {
    w.write_all(&encode_tensor(t)?)?;
    Ok(())
}

/// Reads exactly `n` bytes, reporting how many were missing on a short read.
pub(crate) fn read_exact_or_truncated<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(n.min(1 << 24));
    r.by_ref().take(n as u64).read_to_end(&mut buf)?;
    if buf.len() < n {
        return Err(Error::Truncated {
            needed: n - buf.len(),
        });
    }
    Ok(buf)
}

fn decode_payload<F: Element>(shape: &[usize], bytes: &[u8]) -> Result<Tensor<F>> {
    let data = bytes
        .chunks_exact(F::DTYPE.size())
        .map(F::read_le)
        .collect();
    Tensor::new(shape, data)
}

/// Reads one tensor record from a stream.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<AnyTensor> {
    let header = read_exact_or_truncated(r, 8)?;
    let found: [u8; 4] = header[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let dtype = DType::from_code(header[6]).ok_or(Error::UnknownDtype(header[6]))?;
    let ndim = header[7] as usize;
    let dims = read_exact_or_truncated(r, 4 * ndim)?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape,
            reason: "every axis must have length >= 1".into(),
        });
    }
    let len = shape
        .iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Corrupt(format!("payload size of {shape:?} overflows")))?;
    let payload = read_exact_or_truncated(r, len)?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(&shape, &payload)?),
        DType::F64 => AnyTensor::F64(decode_payload(&shape, &payload)?),
    })
}

pub fn save_tensor<F: Element>(path: impl AsRef<Path>, t: &Tensor<F>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

/// Loads a whole file, which must contain exactly one tensor record.
pub fn load_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Corrupt("trailing bytes after tensor payload".into()));
    }
    Ok(t)
}

pub fn load_tensor<F: Element>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    load_any(path)?.expect()
}
