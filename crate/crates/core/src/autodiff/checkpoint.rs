//! `LFC1` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LFC1"
//! u32 parameter count, then per parameter a record
//! u32 optimizer record count, then the records
//! u64 epoch, u64 seed, u64 config hash
//!
//! record := u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
//!           prod(dims) x f32 values
//! ```
//!
//! Optimizer records are named `adam.m.<param>`, `adam.v.<param>`,
//! `adam.step.<param>` (shape `[1]`) plus `adam.hyper` = `[lr, beta1, beta2, eps]`.

use std::io::{Read, Write};
use std::path::Path;

use super::adam::{AdamConfig, AdamState};
use super::array::Array;
use super::params::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LFC1";
const MAX_RANK: u32 = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub seed: u64,
    pub config_hash: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Array)>,
    pub optimizer: Vec<(String, Array)>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, adam: Option<&AdamState>, meta: CheckpointMeta) -> Self {
        let params = store.iter().map(|(_, n, v)| (n.to_string(), v.clone())).collect();
        let mut optimizer = Vec::new();
        if let Some(st) = adam {
            let c = st.config;
            optimizer.push((
                "adam.hyper".to_string(),
                Array::new(vec![4], vec![c.lr, c.beta1, c.beta2, c.eps]).expect("hyper"),
            ));
            for (id, name, _) in store.iter() {
                let i = id.index();
                optimizer.push((format!("adam.m.{name}"), st.m[i].clone()));
                optimizer.push((format!("adam.v.{name}"), st.v[i].clone()));
                optimizer.push((
                    format!("adam.step.{name}"),
                    Array::new(vec![1], vec![st.steps[i] as f64]).expect("step"),
                ));
            }
        }
        Checkpoint {
            params,
            optimizer,
            meta,
        }
    }

    /// Copies parameter values into `store`, matching by name.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if store.get(id).shape() != value.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    value.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = value.clone();
        }
        Ok(())
    }

    /// Rebuilds optimizer state for `store`, or `None` when none was saved.
    pub fn adam_state(&self, store: &ParamStore) -> Result<Option<AdamState>> {
        if self.optimizer.is_empty() {
            return Ok(None);
        }
        let find = |key: &str| -> Result<&Array> {
            self.optimizer
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, a)| a)
                .ok_or_else(|| Error::Format(format!("missing optimizer record {key}")))
        };
        let h = find("adam.hyper")?.data().to_vec();
        if h.len() != 4 {
            return Err(Error::Format("adam.hyper must hold 4 values".into()));
        }
        let config = AdamConfig {
            lr: h[0],
            beta1: h[1],
            beta2: h[2],
            eps: h[3],
        };
        let mut st = AdamState::for_store(config, store);
        for (id, name, value) in store.iter() {
            let i = id.index();
            let m = find(&format!("adam.m.{name}"))?;
            let v = find(&format!("adam.v.{name}"))?;
            if m.shape() != value.shape() || v.shape() != value.shape() {
                return Err(Error::Format(format!("optimizer state shape for {name}")));
            }
            st.m[i] = m.clone();
            st.v[i] = v.clone();
            st.steps[i] = find(&format!("adam.step.{name}"))?.item() as u64;
        }
        Ok(Some(st))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        write_records(&mut out, &self.params);
        write_records(&mut out, &self.optimizer);
        out.extend_from_slice(&self.meta.epoch.to_le_bytes());
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.extend_from_slice(&self.meta.config_hash.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let params = read_records(&mut r)?;
        let optimizer = read_records(&mut r)?;
        let meta = CheckpointMeta {
            epoch: r.u64()?,
            seed: r.u64()?,
            config_hash: r.u64()?,
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            params,
            optimizer,
            meta,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn write_records(out: &mut Vec<u8>, records: &[(String, Array)]) {
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, a) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(a.rank() as u32).to_le_bytes());
        for &d in a.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in a.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_records(r: &mut Reader<'_>) -> Result<Vec<(String, Array)>> {
    let count = r.u32()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("rank {rank} too large for {name}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            n = n
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("shape overflow in {name}")))?;
            shape.push(d);
        }
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("shape overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push((name, Array::new(shape, data)?));
    }
    Ok(out)
}
