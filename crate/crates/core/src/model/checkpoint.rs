//! Model checkpoints.
//!
//! ```text
//! magic    b"CADECKPT"                 8 bytes
//! version  u32 LE                      currently 1
//! seed     u64 LE
//! config   u32 LE length, then UTF-8 JSON of the ModelConfig
//! count    u32 LE number of tensors
//! tensor*  u32 LE name length, UTF-8 name, u32 LE rank, rank × u64 LE dims,
//!          then numel × f64 LE values
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::{ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::net::Model;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CADECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(m: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&m.seed().to_le_bytes());
    let cfg = serde_json::to_vec(m.config())?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(m.params().len() as u32).to_le_bytes());
    for (name, t) in m.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        };
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

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor { bytes, pos: 0 };
    if bytes.len() < 8 || c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Version("not a checkpoint (bad magic bytes)".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let seed = c.u64()?;
    let len = c.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(len)?)?;
    let count = c.u32()?;
    let mut params = ParameterStore::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` has an implausible shape {shape:?}")))?;
        let data = c
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes in checkpoint",
            bytes.len() - c.pos
        )));
    }
    Model::from_parts(config, params, seed)
}

pub fn save_checkpoint(m: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(m)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&fs::read(path)?)
}
