//! Binary container for models at rest.
//!
//! Layout: magic `GCMP` | u32 LE version | u64 LE manifest length | manifest
//! JSON | raw little-endian tensor payloads in manifest order. The manifest
//! carries a kind tag ("checkpoint" or "graph"), kind-specific metadata and
//! ordered tensor descriptors, so writing the same object twice produces
//! byte-identical files.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Checkpoint, ModelConfig};
use crate::error::{GcError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GCMP";
const VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// A tensor as stored: name, dtype tag, shape and raw little-endian bytes.
#[derive(Debug, Clone)]
pub(crate) struct RawTensor {
    pub name: String,
    pub dtype: String, // "f32" | "qi8"
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl RawTensor {
    pub fn from_f32(name: &str, t: &Tensor) -> RawTensor {
        let mut data = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        RawTensor { name: name.to_string(), dtype: "f32".into(), shape: t.shape().to_vec(), data }
    }

    pub fn to_f32(&self) -> Result<Tensor> {
        if self.dtype != "f32" {
            return Err(GcError::Container(format!("tensor {} is {}, not f32", self.name, self.dtype)));
        }
        let n: usize = self.shape.iter().product();
        if self.data.len() != n * 4 {
            return Err(GcError::Container(format!("tensor {} payload size mismatch", self.name)));
        }
        let data: Vec<f32> =
            self.data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorDesc {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorDesc>,
}

pub(crate) fn write_container(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[RawTensor],
) -> Result<()> {
    let mut descs = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for t in tensors {
        descs.push(TensorDesc {
            name: t.name.clone(),
            dtype: t.dtype.clone(),
            shape: t.shape.clone(),
            offset,
            byte_len: t.data.len() as u64,
        });
        offset += t.data.len() as u64;
    }
    let manifest =
        serde_json::to_vec(&Manifest { kind: kind.to_string(), meta, tensors: descs })?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(manifest.len() as u64).to_le_bytes())?;
    f.write_all(&manifest)?;
    for t in tensors {
        f.write_all(&t.data)?;
    }
    f.flush()?;
    Ok(())
}

pub(crate) fn read_container(path: &Path) -> Result<(String, serde_json::Value, Vec<RawTensor>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|_| GcError::Container("file too short".into()))?;
    if &magic != MAGIC {
        return Err(GcError::Container("bad magic (not a GCMP container)".into()));
    }
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(GcError::Container(format!("unsupported container version {version}")));
    }
    let mut buf8 = [0u8; 8];
    f.read_exact(&mut buf8)?;
    let manifest_len = u64::from_le_bytes(buf8) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    f.read_exact(&mut manifest_bytes)
        .map_err(|_| GcError::Container("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0u64;
    for d in manifest.tensors {
        if d.offset != expected_offset {
            return Err(GcError::Container(format!("tensor {} has non-contiguous offset", d.name)));
        }
        let start = d.offset as usize;
        let end = start + d.byte_len as usize;
        if end > payload.len() {
            return Err(GcError::Container(format!("tensor {} extends past payload", d.name)));
        }
        tensors.push(RawTensor {
            name: d.name,
            dtype: d.dtype,
            shape: d.shape,
            data: payload[start..end].to_vec(),
        });
        expected_offset = end as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(GcError::Container("trailing bytes after last tensor".into()));
    }
    Ok((manifest.kind, manifest.meta, tensors))
}

/// Manifest `kind` of a serialized container ("checkpoint", "graph", ...),
/// for callers that accept several artifact kinds and dispatch on it.
pub fn container_kind(path: &Path) -> Result<String> {
    Ok(read_container(path)?.0)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    tokenizer_hash: Option<String>,
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.validate()?;
    let meta = serde_json::to_value(CheckpointMeta {
        config: ck.config.clone(),
        tokenizer_hash: ck.tokenizer_hash.clone(),
    })?;
    // canonical parameter order, not map order
    let tensors: Vec<RawTensor> = ck
        .config
        .param_shapes()
        .iter()
        .map(|(name, _)| RawTensor::from_f32(name, &ck.tensors[name]))
        .collect();
    write_container(path, "checkpoint", meta, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (kind, meta, tensors) = read_container(path)?;
    if kind != "checkpoint" {
        return Err(GcError::Container(format!("expected a checkpoint container, found {kind:?}")));
    }
    let meta: CheckpointMeta = serde_json::from_value(meta)?;
    let ck = Checkpoint {
        config: meta.config,
        tensors: tensors.iter().map(|t| Ok((t.name.clone(), t.to_f32()?))).collect::<Result<_>>()?,
        tokenizer_hash: meta.tokenizer_hash,
    };
    ck.validate()?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_checkpoint, HeadKind, ModelConfig};

    fn ck() -> Checkpoint {
        let cfg = ModelConfig::uniform(13, 6, 4, 2, 2, 8, HeadKind::SingleLabel { classes: 3 }).unwrap();
        let mut ck = init_checkpoint(&cfg, 11).unwrap();
        ck.tokenizer_hash = Some("ab".repeat(32));
        ck
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gcmp");
        let original = ck();
        save_checkpoint(&original, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, original.config);
        assert_eq!(loaded.tensors, original.tensors);
        assert_eq!(loaded.tokenizer_hash, original.tokenizer_hash);
    }

    #[test]
    fn serialization_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.gcmp"), dir.path().join("b.gcmp"));
        save_checkpoint(&ck(), &p1).unwrap();
        save_checkpoint(&ck(), &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gcmp");
        save_checkpoint(&ck(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("bad_magic.gcmp");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad_magic, &b).unwrap();
        assert!(load_checkpoint(&bad_magic).is_err());

        let truncated = dir.path().join("trunc.gcmp");
        std::fs::write(&truncated, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint(&truncated).is_err());

        let trailing = dir.path().join("trail.gcmp");
        let mut b = bytes.clone();
        b.extend_from_slice(&[0u8; 3]);
        std::fs::write(&trailing, &b).unwrap();
        assert!(load_checkpoint(&trailing).is_err());
    }

    #[test]
    fn sha256_known_answer() {
        // published test vector for the empty string
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
