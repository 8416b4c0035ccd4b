//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GATR" | u32 version | u32 len | config text (len bytes)
//! u32 records | records... | u64 FNV-1a of everything before it
//! record: u32 name_len | name | u32 ndim | u64 dims[ndim] | f32 values
//! ```
//!
//! Record names are prefixed `g/` (generator) or `d/` (discriminator).

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::models::{Discriminator, Gtnet};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GATR";
pub const VERSION: u32 = 1;

/// Restored networks and the config they were trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Config,
    pub g: Gtnet,
    pub g_params: ParamStore<f32>,
    pub d: Discriminator,
    pub d_params: ParamStore<f32>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn to_bytes(config: &Config, g: &ParamStore<f32>, d: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&((g.len() + d.len()) as u32).to_le_bytes());
    for (prefix, store) in [("g/", g), ("d/", d)] {
        for e in store.entries() {
            let name = format!("{prefix}{}", e.name);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(e.value.ndim() as u32).to_le_bytes());
            for &s in e.value.shape() {
                out.extend_from_slice(&(s as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
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

/// Decodes and verifies a checkpoint, rebuilding both networks from the
/// embedded config. Nothing is returned unless every check passes.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 + 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic or too short)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, expected {VERSION}")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if checksum(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
    let config = Config::parse(text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let (g, mut g_params) = Gtnet::new::<f32>(config.generator_config())?;
    let (d, mut d_params) = Discriminator::new::<f32>(config.discriminator_config())?;
    let records = r.u32()? as usize;
    if records != g_params.len() + d_params.len() {
        return Err(Error::Checkpoint(format!(
            "{records} records but the model has {} tensors",
            g_params.len() + d_params.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..records {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
        let count = count.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let value = Tensor::new(shape, values).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        let (store, key) = match (name.strip_prefix("g/"), name.strip_prefix("d/")) {
            (Some(k), _) => (&mut g_params, k),
            (_, Some(k)) => (&mut d_params, k),
            _ => return Err(Error::Checkpoint(format!("record {name:?} has no network prefix"))),
        };
        if !seen.insert(name.to_string()) {
            return Err(Error::Checkpoint(format!("duplicate record {name}")));
        }
        store
            .set_by_name(key, value)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint {
        config,
        g,
        g_params,
        d,
        d_params,
    })
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save_checkpoint(path: &Path, config: &Config, g: &ParamStore<f32>, d: &ParamStore<f32>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(config, g, d)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
