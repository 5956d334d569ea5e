//! Flat binary tensor snapshots.
//!
//! Layout (all little-endian): magic `AVLM`, u32 format version, u32 tensor
//! count, then per tensor: u32 name length, UTF-8 name, u32 rank, u32 dims,
//! raw f32 payload. Tensors are written in sorted name order so identical
//! weights always produce identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"AVLM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("tensor '{name}' dims {dims:?} do not match payload of {len} floats")]
    DimMismatch {
        name: String,
        dims: Vec<usize>,
        len: usize,
    },
    #[error("duplicate tensor name '{0}'")]
    DuplicateName(String),
    #[error("unreasonable {what} {value} while reading checkpoint")]
    Implausible { what: &'static str, value: u64 },
}

/// One stored tensor: shape plus row-major values.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

pub type TensorMap = BTreeMap<String, StoredTensor>;

const MAX_TENSORS: u64 = 1 << 20;
const MAX_NAME_LEN: u64 = 4096;
const MAX_RANK: u64 = 8;
const MAX_DIM: u64 = 1 << 32;

pub fn save(path: &Path, tensors: &TensorMap) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors {
        let numel: usize = t.dims.iter().product();
        if numel != t.values.len() {
            return Err(CheckpointError::DimMismatch {
                name: name.clone(),
                dims: t.dims.clone(),
                len: t.values.len(),
            });
        }
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.dims.len() as u32)?;
        for &d in &t.dims {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in &t.values {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TensorMap, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: magic,
            expected: *MAGIC,
        });
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = r.read_u32::<LittleEndian>()? as u64;
    if count > MAX_TENSORS {
        return Err(CheckpointError::Implausible {
            what: "tensor count",
            value: count,
        });
    }
    let mut out = TensorMap::new();
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as u64;
        if name_len > MAX_NAME_LEN {
            return Err(CheckpointError::Implausible {
                what: "name length",
                value: name_len,
            });
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadName)?;
        let rank = r.read_u32::<LittleEndian>()? as u64;
        if rank > MAX_RANK {
            return Err(CheckpointError::Implausible {
                what: "rank",
                value: rank,
            });
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.read_u32::<LittleEndian>()? as u64;
            numel = numel.saturating_mul(d.max(1));
            dims.push(d as usize);
        }
        if numel > MAX_DIM {
            return Err(CheckpointError::Implausible {
                what: "element count",
                value: numel,
            });
        }
        let total: usize = dims.iter().product();
        let mut values = vec![0.0f32; total];
        r.read_f32_into::<LittleEndian>(&mut values)?;
        if out.contains_key(&name) {
            return Err(CheckpointError::DuplicateName(name));
        }
        out.insert(name, StoredTensor { dims, values });
    }
    Ok(out)
}

/// Hex SHA-256 of a tensor's raw little-endian payload. Shape changes that
/// keep the same bytes are still distinguished by including dims.
pub fn tensor_checksum(t: &StoredTensor) -> String {
    let mut h = Sha256::new();
    for &d in &t.dims {
        h.update((d as u32).to_le_bytes());
    }
    for &v in &t.values {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

/// Per-tensor checksums for a whole map, in name order.
pub fn checksum_map(tensors: &TensorMap) -> BTreeMap<String, String> {
    tensors
        .iter()
        .map(|(k, v)| (k.clone(), tensor_checksum(v)))
        .collect()
}

/// Names whose checksums differ between two snapshots, plus names present in
/// only one of them.
pub fn diff_names(a: &TensorMap, b: &TensorMap) -> Vec<String> {
    let ca = checksum_map(a);
    let cb = checksum_map(b);
    let mut out: Vec<String> = Vec::new();
    for (name, sum) in &ca {
        match cb.get(name) {
            Some(other) if other == sum => {}
            _ => out.push(name.clone()),
        }
    }
    for name in cb.keys() {
        if !ca.contains_key(name) {
            out.push(name.clone());
        }
    }
    out.sort();
    out.dedup();
    out
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
