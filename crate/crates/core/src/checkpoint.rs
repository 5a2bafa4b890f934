//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  b"SEPCKPT\0"
//! u32    format version
//! u32    header length, then that many bytes of JSON header
//! u32    tensor count, then per tensor:
//!        u32 name length, name bytes (UTF-8)
//!        u32 ndim, ndim × u64 dims
//!        prod(dims) × f64 values
//! ```
//!
//! Parameters are stored under their own names; Adam moments under
//! `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::{AdamConfig, AdamState, ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"SEPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Training configuration echo, free-form.
    pub train: serde_json::Value,
    pub epoch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub adam_step: u64,
    pub valid_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet,
    pub first_moment: ParamSet,
    pub second_moment: ParamSet,
}

impl Checkpoint {
    pub fn adam_state(&self) -> AdamState {
        AdamState {
            config: self.header.adam,
            step: self.header.adam_step,
            first_moment: self.first_moment.clone(),
            second_moment: self.second_moment.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, header.len())?;
        out.extend_from_slice(&header);
        let total = self.params.len() + self.first_moment.len() + self.second_moment.len();
        put_u32(&mut out, total)?;
        let groups = [("", &self.params), (MOMENT1, &self.first_moment), (MOMENT2, &self.second_moment)];
        for (prefix, set) in groups {
            for (name, t) in set.iter() {
                let full = format!("{prefix}{name}");
                put_u32(&mut out, full.len())?;
                out.extend_from_slice(full.as_bytes());
                put_u32(&mut out, t.ndim())?;
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes: not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        let mut m1 = ParamSet::new();
        let mut m2 = ParamSet::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data)?;
            if let Some(n) = name.strip_prefix(MOMENT1) {
                m1.insert(n, t);
            } else if let Some(n) = name.strip_prefix(MOMENT2) {
                m2.insert(n, t);
            } else {
                params.insert(name, t);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            header,
            params,
            first_moment: m1,
            second_moment: m2,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
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
