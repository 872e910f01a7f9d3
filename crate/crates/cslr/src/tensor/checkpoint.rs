//! Bit-exact weight files.
//!
//! A checkpoint is a single file holding named tensors plus a small JSON
//! metadata map (epoch counter, optimizer step, and similar bookkeeping).
//! Layout:
//!
//! ```text
//! bytes 0..8    magic  b"CSLRCKPT"
//! bytes 8..16   header length `n` as little-endian u64
//! bytes 16..16+n JSON header: {"format", "version", "extra", "entries"}
//! remainder     payload: raw little-endian element bytes, per entry
//! ```
//!
//! Each header entry records `name`, `shape`, `dtype`, byte `offset` into
//! the payload, and whether the tensor is `trainable`. Values are written
//! verbatim from memory (little-endian IEEE 754), so a save/load round
//! trip reproduces every bit, including NaN payloads — this is what makes
//! resumed training continue on exactly the trajectory of an uninterrupted
//! run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dtype, Element, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CSLRCKPT";
const FORMAT: &str = "cslr-checkpoint";
const VERSION: u32 = 1;

/// Header record for one stored tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default)]
    extra: serde_json::Map<String, serde_json::Value>,
    entries: Vec<EntryMeta>,
}

/// A checkpoint loaded back into memory.
#[derive(Debug)]
pub struct Checkpoint<E> {
    /// `(name, tensor, trainable)` in file order.
    pub tensors: Vec<(String, Tensor<E>, bool)>,
    /// Free-form metadata (epoch, optimizer step, best dev error, ...).
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl<E: Element> Checkpoint<E> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<E>> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, t, _)| t)
    }

    pub fn extra_u64(&self, key: &str) -> Option<u64> {
        self.extra.get(key).and_then(|v| v.as_u64())
    }

    pub fn extra_f64(&self, key: &str) -> Option<f64> {
        self.extra.get(key).and_then(|v| v.as_f64())
    }

    pub fn extra_str(&self, key: &str) -> Option<&str> {
        self.extra.get(key).and_then(|v| v.as_str())
    }
}

/// Serializes named tensors and metadata to `path`, overwriting any
/// existing file. Entries are written in the order given; names must be
/// unique.
pub fn save<E: Element>(
    path: &Path,
    tensors: &[(String, &Tensor<E>, bool)],
    extra: &serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    for (i, (name, _, _)) in tensors.iter().enumerate() {
        if tensors[..i].iter().any(|(prior, _, _)| prior == name) {
            return Err(Error::Checkpoint(format!(
                "duplicate tensor name {name:?}"
            )));
        }
    }

    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, tensor, trainable) in tensors {
        entries.push(EntryMeta {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: E::DTYPE,
            offset: payload.len() as u64,
            trainable: *trainable,
        });
        for &v in tensor.data() {
            v.write_le(&mut payload);
        }
    }

    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        extra: extra.clone(),
        entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);

    std::fs::write(path, &bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a checkpoint written by [`save`] with the same element type.
/// Fails with a checkpoint error on wrong magic, version, dtype, or
/// inconsistent header, and with a short-read error when the payload is
/// truncated.
pub fn load<E: Element>(path: &Path) -> Result<Checkpoint<E>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 16 {
        return Err(Error::ShortRead {
            path: path.display().to_string(),
            expected: 16,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let mut len8 = [0u8; 8];
    len8.copy_from_slice(&bytes[8..16]);
    let header_len = u64::from_le_bytes(len8) as usize;
    let payload_start = 16usize.checked_add(header_len).ok_or_else(|| {
        Error::Checkpoint(format!("{}: header length overflows", path.display()))
    })?;
    if bytes.len() < payload_start {
        return Err(Error::ShortRead {
            path: path.display().to_string(),
            expected: payload_start as u64,
            actual: bytes.len() as u64,
        });
    }

    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: format!("checkpoint header: {e}"),
        })?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: unknown format {:?}",
            path.display(),
            header.format
        )));
    }
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {} (expected {})",
            path.display(),
            header.version,
            VERSION
        )));
    }

    let payload = &bytes[payload_start..];
    let mut tensors = Vec::with_capacity(header.entries.len());
    for entry in &header.entries {
        if entry.dtype != E::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {:?} stored as {}, requested {}",
                path.display(),
                entry.name,
                entry.dtype.name(),
                E::DTYPE.name()
            )));
        }
        if tensors
            .iter()
            .any(|(name, _, _): &(String, Tensor<E>, bool)| *name == entry.name)
        {
            return Err(Error::Checkpoint(format!(
                "{}: duplicate tensor name {:?}",
                path.display(),
                entry.name
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let width = E::DTYPE.size_bytes();
        let begin = entry.offset as usize;
        let end = begin
            .checked_add(numel.checked_mul(width).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "{}: tensor {:?} size overflows",
                    path.display(),
                    entry.name
                ))
            })?)
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "{}: tensor {:?} offset overflows",
                    path.display(),
                    entry.name
                ))
            })?;
        if end > payload.len() {
            return Err(Error::ShortRead {
                path: path.display().to_string(),
                expected: (payload_start + end) as u64,
                actual: bytes.len() as u64,
            });
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in payload[begin..end].chunks_exact(width) {
            data.push(E::read_le(chunk));
        }
        tensors.push((entry.name.clone(), Tensor::new(&entry.shape, data)?, entry.trainable));
    }

    Ok(Checkpoint {
        tensors,
        extra: header.extra,
    })
}
