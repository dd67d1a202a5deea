//! Binary parameter snapshots.
//!
//! Layout (all integers little-endian, independent of the host):
//!
//! ```text
//! "DMAD" | version: u32 | config digest: u64 | config length: u32
//! | config text (canonical key=value) | entry count: u32
//! | entries: name length: u16, name, dtype: u8, rank: u8 (= 4),
//!            dims: 4 x u32, payload (little-endian elements)
//! | checksum: u64 (FNV-1a of every preceding byte)
//! ```
//!
//! Loading verifies magic, version, checksum and the config digest; writes
//! go through a temp file and a rename so a crash never leaves a torn file.

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Result};
use crate::kv::fnv1a64;
use crate::net::ModelConfig;
use crate::nn::ParameterStore;
use crate::tensor::{DType, Element, Shape, Tensor};

const MAGIC: &[u8; 4] = b"DMAD";
const VERSION: u32 = 1;

pub fn serialize_checkpoint<T: Element>(store: &ParameterStore<T>, cfg: &ModelConfig) -> Vec<u8> {
    let cfg_text = cfg.canonical_string();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&cfg.digest().to_le_bytes());
    out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        let shape = tensor.shape();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(4);
        for dim in [shape.n, shape.c, shape.h, shape.w] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

/// Atomic save: temp file in the same directory, then rename.
pub fn save_checkpoint<T: Element>(
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = serialize_checkpoint(store, cfg);
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.at + n > self.bytes.len() {
            return Err(CheckpointError::Malformed { section });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self, section: &'static str) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().unwrap()))
    }

    fn u32(&mut self, section: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &'static str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }
}

pub fn deserialize_checkpoint<T: Element>(
    bytes: &[u8],
) -> std::result::Result<(ParameterStore<T>, ModelConfig), CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 8 + 8 {
        return Err(CheckpointError::Malformed { section: "header" });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored_checksum = u64::from_le_bytes(trailer.try_into().unwrap());
    if fnv1a64(body) != stored_checksum {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let mut cur = Cursor { bytes: body, at: 4 };
    let version = cur.u32("version")?;
    if version > VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            got: version,
            supported: VERSION,
        });
    }
    let stored_digest = cur.u64("digest")?;
    let cfg_len = cur.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(cur.take(cfg_len, "config text")?)
        .map_err(|_| CheckpointError::Malformed { section: "config text" })?;
    if fnv1a64(cfg_text.as_bytes()) != stored_digest {
        return Err(CheckpointError::Malformed { section: "config digest" });
    }
    let cfg = ModelConfig::from_canonical(cfg_text)
        .map_err(|reason| CheckpointError::BadConfig { reason })?;

    let count = cur.u32("entry count")? as usize;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = cur.u16("entry name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "entry name")?)
            .map_err(|_| CheckpointError::Malformed { section: "entry name" })?
            .to_string();
        let dtype = DType::from_tag(cur.take(1, "dtype")?[0])
            .ok_or(CheckpointError::Malformed { section: "dtype" })?;
        if dtype != T::DTYPE {
            return Err(CheckpointError::DTypeMismatch);
        }
        let rank = cur.take(1, "rank")?[0];
        if rank != 4 {
            return Err(CheckpointError::Malformed { section: "rank" });
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = cur.u32("dims")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let elem = dtype.size_bytes();
        let payload = cur.take(shape.numel() * elem, "payload")?;
        let data: Vec<T> = payload.chunks_exact(elem).map(T::read_le).collect();
        let tensor =
            Tensor::new(shape, data).map_err(|_| CheckpointError::Malformed { section: "payload" })?;
        store.insert(name, tensor);
    }
    if cur.at != body.len() {
        return Err(CheckpointError::Malformed { section: "trailing bytes" });
    }
    Ok((store, cfg))
}

/// Load parameters and the config they were built from.
pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<(ParameterStore<T>, ModelConfig)> {
    let bytes = fs::read(path.as_ref())?;
    Ok(deserialize_checkpoint(&bytes)?)
}

/// Load, additionally refusing a snapshot whose architecture digest differs
/// from `expected`.
pub fn load_checkpoint_compatible<T: Element>(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<(ParameterStore<T>, ModelConfig)> {
    let (store, cfg) = load_checkpoint(path)?;
    if cfg.digest() != expected.digest() {
        return Err(CheckpointError::ConfigDigestMismatch {
            stored: cfg.digest(),
            requested: expected.digest(),
        }
        .into());
    }
    Ok((store, cfg))
}
