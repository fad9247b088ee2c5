//! Tensor container: an 8-byte magic, a little-endian `u64` header length, a
//! JSON header (free-form config plus tensor manifest), then `f32` blobs.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Tensor;

pub const MAGIC: &[u8; 8] = b"RSCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub numel: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

/// Sizes of a written container.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerSize {
    /// Raw `f32` tensor bytes.
    pub payload_bytes: u64,
    /// Everything, including magic and header.
    pub total_bytes: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    config: &serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<ContainerSize> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let numel = t.numel() as u64;
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            numel,
        });
        offset += numel * 4;
    }
    let header = serde_json::to_vec(&Header {
        config: config.clone(),
        tensors: entries,
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, t) in tensors {
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(ContainerSize {
        payload_bytes: offset,
        total_bytes: 16 + header.len() as u64 + offset,
    })
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let start = e.offset as usize;
        let end = start + e.numel as usize * 4;
        if end > payload.len() || e.shape.iter().product::<usize>() != e.numel as usize {
            return Err(Error::Checkpoint(format!("tensor {} out of bounds", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        tensors.push((e.name, Tensor::new(&e.shape, data)?));
    }
    Ok(Checkpoint {
        config: header.config,
        tensors,
    })
}
