//! Tensor archive format shared by backbone files and training checkpoints.
//!
//! Layout: 8-byte magic, little-endian u64 manifest length, manifest JSON,
//! then raw little-endian tensor data in manifest order. Tensors are written
//! sorted by name, so identical contents produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"HTCKPT01";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub schema_version: u32,
    /// What the archive holds: "backbone", "train", or "identity_stub".
    pub kind: String,
    pub dtype: String,
    /// Kind-specific metadata (arch description, train state, ...).
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_archive<T: Scalar>(
    path: &Path,
    kind: &str,
    extra: serde_json::Value,
    tensors: &BTreeMap<String, ArrayD<T>>,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let byte_len = (t.len() * T::BYTES) as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            byte_len,
        });
        offset += byte_len;
    }
    let manifest = ArchiveManifest {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        dtype: T::DTYPE.to_string(),
        extra,
        tensors: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode failed: {e}")))?;

    let mut out = Vec::with_capacity(16 + manifest_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for t in tensors.values() {
        for v in t.iter() {
            v.write_le(&mut out);
        }
    }
    let io = |e: std::io::Error| Error::io(path, e);
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&out).map_err(io)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<ArchiveManifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(path, &bytes).map(|(m, _)| m)
}

fn parse_manifest<'a>(path: &Path, bytes: &'a [u8]) -> Result<(ArchiveManifest, &'a [u8])> {
    let corrupt = |detail: &str| {
        Error::Load {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        }
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a tensor archive (bad magic)"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(corrupt("truncated manifest"));
    }
    let manifest: ArchiveManifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| corrupt(&format!("manifest decode failed: {e}")))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(corrupt(&format!(
            "schema version {} unsupported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    Ok((manifest, &bytes[16 + mlen..]))
}

pub fn read_archive<T: Scalar>(
    path: &Path,
) -> Result<(ArchiveManifest, BTreeMap<String, ArrayD<T>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, data) = parse_manifest(path, &bytes)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Load {
            path: path.to_path_buf(),
            detail: format!("dtype {} does not match requested {}", manifest.dtype, T::DTYPE),
        });
    }
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let (start, end) = (e.offset as usize, (e.offset + e.byte_len) as usize);
        if end > data.len() {
            return Err(Error::Load {
                path: path.to_path_buf(),
                detail: format!("tensor {} extends past end of file", e.name),
            });
        }
        let n: usize = e.shape.iter().product();
        if n * T::BYTES != e.byte_len as usize {
            return Err(Error::Load {
                path: path.to_path_buf(),
                detail: format!("tensor {} length disagrees with shape", e.name),
            });
        }
        let values: Vec<T> = data[start..end]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), values)
            .map_err(|err| Error::Load {
                path: path.to_path_buf(),
                detail: format!("tensor {}: {err}", e.name),
            })?;
        tensors.insert(e.name.clone(), arr);
    }
    Ok((manifest, tensors))
}

/// Writes a checkpoint whose translator is the identity map; used to test
/// plumbing without real weights.
pub fn write_identity_stub(path: &Path) -> Result<()> {
    write_archive::<f32>(
        path,
        "identity_stub",
        serde_json::json!({}),
        &BTreeMap::new(),
    )
}
