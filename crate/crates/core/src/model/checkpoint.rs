//! Binary checkpoint format.
//!
//! ```text
//! magic "DAPECKPT" | version u32 | config_len u64 | config JSON
//! count u32 | count × (name_len u32 | name | ndim u32 | ndim × u64 | f32 payload)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DAPECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)?;
    let mut out = Vec::with_capacity(64 + config.len() + 4 * model.params.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::CorruptCheckpoint(format!("{what} overflows")))
    }
}

pub fn decode(buf: &[u8]) -> Result<(ModelConfig, ParamStore)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let clen = r.len("config length")?;
    let config: ModelConfig = serde_json::from_slice(r.take(clen, "config")?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config snapshot: {e}")))?;
    let count = r.u32("record count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|_| Error::CorruptCheckpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32("rank")? as usize;
        let shape = (0..ndim).map(|_| r.len("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= buf.len() / 4)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("implausible shape {shape:?} for `{name}`")))?;
        let payload = r.take(4 * numel, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(format!("`{name}`: {e}")))?;
        if params.contains(&name) {
            return Err(Error::CorruptCheckpoint(format!("duplicate record `{name}`")));
        }
        params.insert(name, t);
    }
    if r.pos != buf.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((config, params))
}

/// Writes `model` to `path` through a temporary file and a rename.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint with the config stored inside it.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, params) = decode(&bytes)?;
    Model::from_params(config, params)
}

/// Loads a checkpoint that must have been written for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (stored, params) = decode(&bytes)?;
    let model = Model::from_params(expected.clone(), params)?;
    if &stored != expected {
        let a = serde_json::to_value(&stored)?;
        let b = serde_json::to_value(expected)?;
        let mut diffs = Vec::new();
        diff_paths(&a, &b, String::new(), &mut diffs);
        return Err(Error::CheckpointMismatch(format!("config differs at {}", diffs.join(", "))));
    }
    Ok(model)
}

fn diff_paths(a: &serde_json::Value, b: &serde_json::Value, at: String, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<_> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                diff_paths(x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), path, out);
            }
        }
        _ if a != b => out.push(if at.is_empty() { "<root>".into() } else { at }),
        _ => {}
    }
}
