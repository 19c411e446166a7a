//! Binary checkpoint format.
//!
//! Layout: magic `VTCK`, u32 format version, u32 metadata length, metadata
//! JSON, then one record per parameter in insertion order: u32 name
//! length, name bytes, u8 dtype code, u32 rank, u32 dims, little-endian
//! values. The metadata carries the model config, the full vocabulary, and
//! hashes of both, and deliberately nothing volatile, so saving, loading,
//! and saving again is byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::{Dtype, Scalar};

pub const MAGIC: &[u8; 4] = b"VTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub vocab_hash: String,
    /// Which training stage produced this: "concepts" or "caption".
    pub stage: String,
    pub step: u64,
    pub vocab: Vec<String>,
    pub model: ModelConfig,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    set: &ParamSet<T>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| Error::data(format!("cannot encode checkpoint metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    for p in set.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE.code());
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            v.write_le(&mut out);
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data("checkpoint truncated".to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Loads a checkpoint. The parameter set is rebuilt from the stored model
/// config (which fixes names, shapes, and groups), then record values are
/// written over it; every record must match an existing parameter and
/// every parameter must be covered.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamSet<T>, CheckpointMeta)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::data(format!("bad checkpoint metadata: {e}")))?;
    if meta.vocab.len() != meta.model.vocab_size {
        return Err(Error::data(format!(
            "metadata vocabulary has {} entries but model expects {}",
            meta.vocab.len(),
            meta.model.vocab_size
        )));
    }

    let mut set = model::init_params::<T>(&meta.model, 0)?;
    let mut seen = std::collections::HashSet::new();
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::data(format!("bad parameter name: {e}")))?;
        let dtype = Dtype::from_code(r.u8()?)?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let width = match dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let raw = r.take(numel * width)?;
        let param = set
            .get(&name)
            .ok_or_else(|| Error::data(format!("checkpoint has unknown parameter {name:?}")))?;
        if param.tensor.shape() != shape.as_slice() {
            return Err(Error::data(format!(
                "parameter {name:?} has shape {:?} in checkpoint, model expects {:?}",
                shape,
                param.tensor.shape()
            )));
        }
        let mut values = Vec::with_capacity(numel);
        match dtype {
            Dtype::F32 => {
                for c in raw.chunks_exact(4) {
                    values.push(T::from_f64(f32::read_le(c) as f64));
                }
            }
            Dtype::F64 => {
                for c in raw.chunks_exact(8) {
                    values.push(T::from_f64(f64::read_le(c)));
                }
            }
        }
        set.copy_values(&name, &values)?;
        if !seen.insert(name.clone()) {
            return Err(Error::data(format!("duplicate parameter record {name:?}")));
        }
    }
    if seen.len() != set.len() {
        return Err(Error::data(format!(
            "checkpoint covers {} of {} parameters",
            seen.len(),
            set.len()
        )));
    }
    Ok((set, meta))
}
