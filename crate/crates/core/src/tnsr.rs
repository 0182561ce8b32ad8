//! The TNSR tensor container.
//!
//! ```text
//! b"TNSR"  u8 version (=1)  u8 ndim  u16 reserved (=0)
//! ndim x u32 dims
//! product(dims) x f32 values, row-major
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let ndim = u8::try_from(t.ndim()).map_err(|_| Error::InvalidDims("too many dimensions".into()))?;
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(ndim);
    out.extend_from_slice(&[0, 0]);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::InvalidDims(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::InvalidArgument(format!("value {v} overflows f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let err = |m: &str| Error::Format(format!("TNSR: {m}"));
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(err("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(err(&format!("unsupported version {}", bytes[4])));
    }
    let ndim = bytes[5] as usize;
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(err("reserved bytes must be zero"));
    }
    let header = 8 + 4 * ndim;
    if bytes.len() < header {
        return Err(err("truncated header"));
    }
    let dims: Vec<usize> =
        bytes[8..header].chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
    let count =
        dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| err("element count overflows"))?;
    if bytes.len() - header != count.checked_mul(4).ok_or_else(|| err("element count overflows"))? {
        return Err(err(&format!("expected {} payload bytes, found {}", count * 4, bytes.len() - header)));
    }
    let data =
        bytes[header..].chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
    Tensor::new(dims, data).map_err(|e| err(&e.to_string()))
}

pub fn write(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
