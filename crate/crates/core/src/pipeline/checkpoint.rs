//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "DFCK"
//! version  u32      1
//! digest   u64      digest of the config text below
//! step     u64      optimizer steps taken
//! config   u32 byte length, then UTF-8 TOML run config
//! count    u32      number of arrays
//! array    u32 name length, UTF-8 name, u32 ndim, ndim × u64 dims, f64 values
//! ```

use std::path::Path;

use super::{text_digest, RunConfig};
use crate::error::{Error, Result};
use crate::model::DepthFieldModel;
use crate::rng::substream;
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub model: DepthFieldModel,
    pub params: ParamStore,
}

pub fn write_checkpoint(config: &RunConfig, step: u64, params: &ParamStore) -> Vec<u8> {
    let text = config.to_toml();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&text_digest(&text).to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for id in params.ids() {
        let name = params.name(id);
        let t = params.get(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        let path = self.path;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::format(path, "invalid UTF-8"))
    }
}

/// Parse checkpoint bytes and rebuild the model they belong to.
pub fn read_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let digest = r.u64()?;
    let step = r.u64()?;
    let text = r.text()?;
    let found = text_digest(text);
    if found != digest {
        return Err(Error::DigestMismatch { expected: digest, found });
    }
    let config = RunConfig::from_toml(text)?;
    let (model, mut params) = DepthFieldModel::new(config.model, &mut substream(config.seed, "init"))?;
    let count = r.u32()? as usize;
    if count != params.len() {
        return Err(Error::format(path, format!("{count} arrays for a model with {} parameters", params.len())));
    }
    for _ in 0..count {
        let name = r.text()?.to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.set(&name, Tensor::new(shape, data)?).map_err(|e| Error::format(path, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config, step, model, params })
}

pub fn save_checkpoint(path: &Path, config: &RunConfig, step: u64, params: &ParamStore) -> Result<()> {
    std::fs::write(path, write_checkpoint(config, step, params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(path, &bytes)
}
