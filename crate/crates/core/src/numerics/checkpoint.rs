//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//! `b"DADP"`, `u32` version = 1, `u32` block count, then per block in name
//! order: `u32` name length, UTF-8 name, `u32` rank, `rank × u64` dims,
//! `numel × f32` payload.

use std::io::Write;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DADP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad checkpoint magic".into(),
        });
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = c.u32("block count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = c.pos as u64;
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|e| Error::Format {
                offset: at,
                detail: format!("parameter name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = c.take(numel * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        store
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::Format {
                offset: at,
                detail: e.to_string(),
            })?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            detail: "trailing bytes after last block".into(),
        });
    }
    Ok(store)
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<u64> {
    let bytes = encode_checkpoint(store);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
