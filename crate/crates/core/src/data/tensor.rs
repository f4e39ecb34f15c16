//! `LFT1` tensor files.
//!
//! ```text
//! "LFT1", u8 dtype (0 = f32, 1 = u8), u32 rank, rank x u32 dims, raw data
//! ```
//!
//! All multi-byte values are little-endian.

use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LFT1";
const MAX_RANK: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Tensor {
            shape,
            data: TensorData::F32(data),
        })
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Tensor {
            shape,
            data: TensorData::U8(data),
        })
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::Format("expected an f32 tensor, found u8".into())),
        }
    }

    pub fn into_u8(self) -> Result<Vec<u8>> {
        match self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(Error::Format("expected a u8 tensor, found f32".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 4 * self.shape.len() + 4 * self.len());
        out.extend_from_slice(MAGIC);
        out.push(match self.data {
            TensorData::F32(_) => 0,
            TensorData::U8(_) => 1,
        });
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let dtype = bytes[4];
        let rank = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
        if rank > MAX_RANK {
            return Err(Error::Format(format!("tensor rank {rank} too large")));
        }
        let header = 9 + 4 * rank as usize;
        if bytes.len() < header {
            return Err(Error::Format("truncated tensor header".into()));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut count: usize = 1;
        for k in 0..rank as usize {
            let at = 9 + 4 * k;
            let d = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::Format("tensor shape overflows".into()))?;
            shape.push(d);
        }
        let width = match dtype {
            0 => 4,
            1 => 1,
            other => return Err(Error::Format(format!("unknown tensor dtype {other}"))),
        };
        let body = count
            .checked_mul(width)
            .ok_or_else(|| Error::Format("tensor shape overflows".into()))?;
        let raw = &bytes[header..];
        if raw.len() < body {
            return Err(Error::Format("truncated tensor data".into()));
        }
        if raw.len() > body {
            return Err(Error::Format("trailing bytes after tensor data".into()));
        }
        let data = if dtype == 0 {
            TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            )
        } else {
            TensorData::U8(raw.to_vec())
        };
        Ok(Tensor { shape, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor shape overflows".into()))?;
    if n != len {
        return Err(Error::shape("tensor", format!("shape {shape:?} holds {n} values, got {len}")));
    }
    Ok(())
}
