//! Binary parameter checkpoints.
//!
//! Layout (little endian): `SECT`, version `u32`, tensor count `u32`, then per
//! tensor the name length `u32`, UTF-8 name, rank `u32`, dims as `u32` and the
//! values as `f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{param_specs, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SECT";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.total() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated checkpoint while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32("tensor count")?;
    let mut params = ModelParams::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Format(format!("tensor {name} has invalid shape {shape:?}")))?;
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Format(format!("tensor {name} too large")))?,
            "values",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t =
            Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        params
            .insert(name, t)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

/// Write through a temporary sibling and rename, so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn save_checkpoint(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, encode(params)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Load and verify every tensor against the parameters `cfg` would build.
pub fn load_for_config(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<ModelParams<f32>> {
    let params = load_checkpoint(path)?;
    params.check_compatible(&param_specs(cfg)?)?;
    Ok(params)
}
