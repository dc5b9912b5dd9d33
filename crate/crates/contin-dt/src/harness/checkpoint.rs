//! Binary checkpoint format.
//!
//! Layout: magic `CDT1`, u32 version, u32 entry count, then per entry a
//! u32 name length, UTF-8 name, u32 rank, u64 dims, and a little-endian
//! f32 payload; the file ends with a 64-bit FNV-1a checksum of every
//! preceding byte. Loads verify magic, version, and checksum; a save/load
//! round trip is bit-identical.

use super::HarnessError;
use crate::numerics::ParamStore;
use std::path::Path;

const MAGIC: &[u8; 4] = b"CDT1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Serializes named tensors in the given order.
pub fn encode(entries: &[CheckpointEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for d in &e.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

/// Decodes and verifies a checkpoint image.
pub fn decode(bytes: &[u8]) -> Result<Vec<CheckpointEntry>, HarnessError> {
    let bad = |m: &str| HarnessError::Io(format!("checkpoint: {m}"));
    if bytes.len() < MAGIC.len() + 4 + 4 + 8 {
        return Err(bad("truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(bad("checksum mismatch"));
    }
    let mut cur = body;
    let mut take = |n: usize| -> Result<&[u8], HarnessError> {
        if cur.len() < n {
            return Err(bad("truncated"));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| bad("name is not utf-8"))?
            .to_string();
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if rank > 8 {
            return Err(bad("implausible rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let d = usize::try_from(d).map_err(|_| bad("dimension overflow"))?;
            numel = numel.checked_mul(d).ok_or_else(|| bad("shape overflow"))?;
            shape.push(d);
        }
        if numel > cur.len() / 4 + 1 {
            return Err(bad("payload larger than file"));
        }
        let raw = take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(CheckpointEntry { name, shape, data });
    }
    if !cur.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(entries)
}

/// Writes every parameter of the store, in registration order.
pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<(), HarnessError> {
    let entries: Vec<CheckpointEntry> = store
        .iter()
        .map(|(_, p)| CheckpointEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
        .collect();
    std::fs::write(path, encode(&entries))
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>, HarnessError> {
    let bytes =
        std::fs::read(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

/// Applies entries to a store by parameter name; shapes must match.
pub fn load_into_store(entries: &[CheckpointEntry], store: &mut ParamStore) -> Result<(), HarnessError> {
    for e in entries {
        let Some(id) = store.iter().find(|(_, p)| p.name == e.name).map(|(id, _)| id) else {
            return Err(HarnessError::Config(format!(
                "checkpoint entry `{}` has no matching parameter",
                e.name
            )));
        };
        if store.value(id).shape() != e.shape.as_slice() {
            return Err(HarnessError::Config(format!(
                "checkpoint entry `{}` shape mismatch",
                e.name
            )));
        }
        store.value_mut(id).data_mut().copy_from_slice(&e.data);
    }
    Ok(())
}
