//! `PGNS1` checkpoint files: magic line, one JSON manifest line, then the
//! concatenated little-endian f32 payloads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"PGNS1\n";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut payload = Vec::new();
    let mut offset = 0;
    for id in store.ids() {
        let t = store.get(id);
        tensors.push(TensorEntry {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            offset,
            trainable: store.is_trainable(id),
        });
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += t.len();
    }
    let manifest = Manifest {
        tensors,
        meta: meta.clone(),
    };
    let mut bytes = MAGIC.to_vec();
    let header = serde_json::to_string(&manifest).map_err(|e| Error::format(path, e.to_string()))?;
    bytes.extend_from_slice(header.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::format(path, "missing PGNS1 magic"))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "unterminated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&rest[..nl]).map_err(|e| Error::format(path, format!("manifest: {e}")))?;
    let payload = &rest[nl + 1..];
    let mut store = ParamStore::new();
    let mut expected = 0;
    for t in manifest.tensors {
        let n: usize = t.shape.iter().product();
        let start = t.offset * 4;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(Error::format(path, format!("tensor {} exceeds payload", t.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.add(t.name, Tensor::new(t.shape, data)?, t.trainable)?;
        expected = expected.max(end);
    }
    if expected != payload.len() {
        return Err(Error::format(path, "payload length does not match manifest"));
    }
    Ok((store, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgns");
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new([2, 2], vec![1.0, -2.5, 0.125, 3.0]).unwrap(), true)
            .unwrap();
        s.add("a.running_mean", Tensor::new([1], vec![0.5]).unwrap(), false)
            .unwrap();
        let meta = serde_json::json!({"kind": "test", "n": 3});
        save_checkpoint(&path, &s, &meta).unwrap();
        let (back, m) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back.len(), 2);
        let id = back.id_of("a.weight").unwrap();
        assert_eq!(back.get(id).shape(), &[2, 2]);
        assert_eq!(back.get(id).data(), &[1.0, -2.5, 0.125, 3.0]);
        assert!(!back.is_trainable(back.id_of("a.running_mean").unwrap()));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgns");
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros([8]), true).unwrap();
        save_checkpoint(&path, &s, &serde_json::Value::Null).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
        fs::write(&path, b"nope\n").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
