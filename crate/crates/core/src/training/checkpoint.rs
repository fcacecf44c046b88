//! SCPC checkpoint format.
//!
//! Layout (little-endian): magic `SCPC`, version u32, sha-256 digest of the
//! embedded config JSON (32 bytes), config length u32, config JSON bytes,
//! record count u32, then per parameter: name length u16, UTF-8 name, rank
//! u8, one u32 extent per axis, f32 payload.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SCPC";
const VERSION: u32 = 1;

pub fn config_digest(config_json: &str) -> String {
    let mut h = Sha256::new();
    h.update(config_json.as_bytes());
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_json: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn digest(&self) -> String {
        config_digest(&self.config_json)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn save_checkpoint<'a>(
    path: &Path,
    config_json: &str,
    params: impl Iterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let records: Vec<(&str, &Tensor)> = params.collect();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    let mut h = Sha256::new();
    h.update(config_json.as_bytes());
    bytes.extend_from_slice(&h.finalize());
    let cfg = config_json.as_bytes();
    bytes.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    bytes.extend_from_slice(cfg);
    bytes.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("parameter name too long: {} bytes", nb.len()),
            });
        }
        bytes.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        bytes.extend_from_slice(nb);
        let shape = t.shape();
        bytes.push(shape.len() as u8);
        for &e in shape {
            bytes.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.display().to_string(),
                detail: format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.off,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut r = Reader { bytes: &bytes, off: 0, path };
    let fmt = |detail: String| Error::Format { path: path.display().to_string(), detail };

    if r.take(4)? != MAGIC {
        return Err(fmt("bad magic, expected SCPC".to_string()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(fmt(format!("unsupported version {version}, expected {VERSION}")));
    }
    let stored_digest = hex(r.take(32)?);
    let cfg_len = r.u32()? as usize;
    let config_json = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|e| fmt(format!("config is not UTF-8: {e}")))?
        .to_string();
    let actual = config_digest(&config_json);
    if actual != stored_digest {
        return Err(fmt(format!(
            "embedded config corrupted: digest {actual} != stored {stored_digest}"
        )));
    }

    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| fmt(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| fmt(format!("parameter {name}: {e}")))?;
        params.push((name, tensor));
    }
    if r.off != bytes.len() {
        return Err(fmt(format!("{} trailing bytes after last record", bytes.len() - r.off)));
    }
    Ok(Checkpoint { config_json, params })
}

/// Load and insist the embedded config matches `expected_json`, unless forced.
pub fn load_checkpoint_for(path: &Path, expected_json: &str, force: bool) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if !force {
        let found = ckpt.digest();
        let expected = config_digest(expected_json);
        if found != expected {
            return Err(Error::ConfigDigest { found, expected });
        }
    }
    Ok(ckpt)
}
