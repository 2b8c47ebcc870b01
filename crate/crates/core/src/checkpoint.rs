//! Flat binary weight checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "PBWT0001"
//! config_len   u32
//! config       config_len bytes of ModelConfig JSON
//! tensor_count u32
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes UTF-8
//!   rows       u64
//!   cols       u64
//!   data       rows*cols f64 values, row-major, little-endian
//! ```
//!
//! Tensors appear in the fixed order of [`ModelWeights::tensors`];
//! readers may look them up by name instead of relying on order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};

pub const MAGIC: &[u8; 8] = b"PBWT0001";

pub fn to_bytes(w: &ModelWeights, cfg: &ModelConfig) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg_json = serde_json::to_vec(cfg)?;
    out.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg_json);
    let tensors = w.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, rows, cols, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(rows as u64).to_le_bytes());
        out.extend_from_slice(&(cols as u64).to_le_bytes());
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, ModelWeights)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let cfg_len = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    cfg.validate()?;
    let count = r.u32()? as usize;
    let mut weights = ModelWeights::zeros_like(&cfg);
    let expected = weights.tensors().len();
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} tensors, config implies {expected}"
        )));
    }
    // read into a name -> data map via the mutable tensor views
    let mut entries: Vec<(String, usize, usize, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, rows, cols, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    let shapes: std::collections::HashMap<String, (usize, usize)> = weights
        .tensors()
        .into_iter()
        .map(|(n, rws, cls, _)| (n, (rws, cls)))
        .collect();
    let mut by_name: std::collections::HashMap<String, Vec<f64>> =
        std::collections::HashMap::new();
    for (name, rows, cols, data) in entries {
        match shapes.get(&name) {
            None => return Err(Error::Checkpoint(format!("unknown tensor '{name}'"))),
            Some(&(er, ec)) if (er, ec) != (rows, cols) => {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {rows}x{cols}, expected {er}x{ec}"
                )));
            }
            Some(_) => {}
        }
        if by_name.insert(name.clone(), data).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
        }
    }
    for (name, slot) in weights.tensors_mut() {
        let data = by_name
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        slot.copy_from_slice(&data);
    }
    Ok((cfg, weights))
}

pub fn save(w: &ModelWeights, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(w, cfg)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelWeights)> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;

    #[test]
    fn roundtrip_is_exact() {
        let cfg = ModelConfig::default();
        let w = ModelWeights::init(&cfg, &mut Rng::new(3));
        let bytes = to_bytes(&w, &cfg).unwrap();
        let (cfg2, w2) = from_bytes(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(w, w2);
    }

    #[test]
    fn corrupt_magic_rejected() {
        let cfg = ModelConfig::default();
        let w = ModelWeights::init(&cfg, &mut Rng::new(3));
        let mut bytes = to_bytes(&w, &cfg).unwrap();
        bytes[0] = b'X';
        assert!(from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncated_rejected() {
        let cfg = ModelConfig::default();
        let w = ModelWeights::init(&cfg, &mut Rng::new(3));
        let bytes = to_bytes(&w, &cfg).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 9]).is_err());
    }
}
