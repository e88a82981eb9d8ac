//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SPSCCKPT"
//! version    u32      1
//! config     u64 length + UTF-8 JSON of ModelConfig
//! count      u64      number of tensors
//! tensor*    u32 name length, name bytes, u64 rows, u64 cols, rows*cols f64
//! ```
//!
//! Tensors are stored in registration order, values as raw IEEE-754 bits, so
//! a save/load round trip is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Detector, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPSCCKPT";
const VERSION: u32 = 1;
const MAX_NAME: usize = 4096;

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Detector) -> Result<()> {
    let bytes = encode(model)?;
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Detector> {
    let bytes = fs::read(path.as_ref())?;
    decode(&bytes)
}

pub(crate) fn encode(model: &Detector) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(model.config()).map_err(|e| Error::Format(e.to_string()))?;
    out.write_all(&(cfg.len() as u64).to_le_bytes())?;
    out.write_all(&cfg)?;
    out.write_all(&(model.params().len() as u64).to_le_bytes())?;
    for (_, name, m) in model.params().iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(m.rows() as u64).to_le_bytes())?;
        out.write_all(&(m.cols() as u64).to_le_bytes())?;
        for v in m.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(out)
}

pub(crate) fn decode(mut bytes: &[u8]) -> Result<Detector> {
    let r = &mut bytes;
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = read_len(r, r.len())?;
    let mut cfg = vec![0u8; cfg_len];
    read_exact(r, &mut cfg)?;
    let config: ModelConfig =
        serde_json::from_slice(&cfg).map_err(|e| Error::Format(format!("bad config header: {e}")))?;
    let count = read_len(r, r.len())?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len > MAX_NAME {
            return Err(Error::Format(format!("tensor name length {name_len} is implausible")));
        }
        let mut name = vec![0u8; name_len];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rows = read_len(r, usize::MAX)?;
        let cols = read_len(r, usize::MAX)?;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.len()))
            .ok_or_else(|| Error::Format(format!("tensor '{name}' overruns the file")))?;
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            read_exact(r, &mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        if store.id(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{name}'")));
        }
        store.insert(name, Matrix::from_vec(rows, cols, data));
    }
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after last tensor", r.len())));
    }
    Detector::from_params(config, store)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("checkpoint is truncated".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_len(r: &mut &[u8], max: usize) -> Result<usize> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    let v = u64::from_le_bytes(b);
    usize::try_from(v)
        .ok()
        .filter(|&v| v <= max)
        .ok_or_else(|| Error::Format(format!("length field {v} is out of range")))
}
