//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `TGTCKPT\0`, `u32` version, `u32` length
//! plus UTF-8 model config text, `u32` length plus UTF-8 metadata text,
//! `u32` parameter count, then per parameter: `u32` name length, name bytes,
//! `u32` rank, `u64` extents, `f64` payload.

use std::io::{Read, Write};
use std::path::Path;

use super::{parameter_shapes, ModelConfig, TgtParameters};
use crate::autodiff::Tensor;
use crate::config::KeyValues;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TGTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Serialise `params` with `config` and free-form `metadata` (key-value text).
pub fn encode_checkpoint(config: &ModelConfig, params: &TgtParameters, metadata: &KeyValues) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_str(&mut out, &config.to_key_values().render());
    put_str(&mut out, &metadata.render());
    put_u32(&mut out, params.len() as u32);
    for (name, t) in params.iter() {
        put_str(&mut out, name);
        put_u32(&mut out, t.shape.len() as u32);
        for &e in &t.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_checkpoint(path: &Path, config: &ModelConfig, params: &TgtParameters, metadata: &KeyValues) -> Result<()> {
    let bytes = encode_checkpoint(config, params, metadata);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 in checkpoint".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, TgtParameters, KeyValues)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let kv = KeyValues::parse(&c.string()?, Path::new("<checkpoint config>"))?;
    let mut config = ModelConfig::new(2, 1);
    config.apply(&kv)?;
    let metadata = KeyValues::parse(&c.string()?, Path::new("<checkpoint metadata>"))?;
    let expected = parameter_shapes(&config);
    let count = c.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!("expected {} parameters, found {count}", expected.len())));
    }
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in expected {
        let name = c.string()?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        if name != want_name || shape != want_shape {
            return Err(Error::Checkpoint(format!("parameter {name:?} {shape:?} does not match {want_name:?} {want_shape:?}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = c.take(n * 8)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("parameter {name:?} holds non-finite values")));
        }
        names.push(name);
        tensors.push(Tensor::new(shape, data));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok((config, TgtParameters::from_parts(names, tensors), metadata))
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, TgtParameters, KeyValues)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
