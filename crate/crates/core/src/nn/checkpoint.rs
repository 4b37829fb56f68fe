//! `SSLC` files: magic, version, a JSON header with the architecture and
//! free-form metadata, then step, seed, parameter count and the flat
//! parameter, first-moment and second-moment arrays as little-endian f64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ArchConfig, TinyNet};
use super::optim::TrainState;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SSLC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub meta: serde_json::Value,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    meta: serde_json::Value,
}

impl Checkpoint {
    /// Rejects checkpoints built for another architecture.
    pub fn expect_arch(&self, arch: &ArchConfig) -> Result<()> {
        if &self.arch != arch {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture {} does not match {}",
                serde_json::to_string(&self.arch)?,
                serde_json::to_string(arch)?
            )));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header { arch: ck.arch.clone(), meta: ck.meta.clone() })?;
    let s = &ck.state;
    let p = s.params.numel();
    let mut out = Vec::with_capacity(4 + 4 + 4 + header.len() + 24 + 3 * 8 * p);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&s.step.to_le_bytes());
    out.extend_from_slice(&s.seed.to_le_bytes());
    out.extend_from_slice(&(p as u64).to_le_bytes());
    for store in [&s.params, &s.m, &s.v] {
        for v in store.tensors.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
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

    fn store(&mut self, like: &ParamStore) -> Result<ParamStore> {
        let mut s = like.zeros_like();
        for v in s.tensors.iter_mut().flatten() {
            *v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        }
        Ok(s)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("version {version}, expected {VERSION}")));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let net = TinyNet::new(&header.arch).map_err(|e| Error::Checkpoint(format!("bad architecture: {e}")))?;
    let step = r.u64()?;
    let seed = r.u64()?;
    let p = r.u64()? as usize;
    let layout = ParamStore::init(net.specs(), 0).zeros_like();
    if p != layout.numel() {
        return Err(Error::Checkpoint(format!(
            "{p} parameters stored, architecture has {}",
            layout.numel()
        )));
    }
    let params = r.store(&layout)?;
    let m = r.store(&layout)?;
    let v = r.store(&layout)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { arch: header.arch, meta: header.meta, state: TrainState { params, m, v, step, seed } })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
