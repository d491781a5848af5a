//! Named tensor collections and the versioned checkpoint container.
//!
//! Container layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `VQCK` |
//! | 4 | format version (u32) |
//! | 8 | header length `H` (u64) |
//! | H | UTF-8 JSON header `{"meta": …, "tensors": [{"name", "shape", "offset"}]}` |
//! | … | tensor payloads as f64, concatenated in header order; `offset` counts f64 values |

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vqspeech_autograd::{ParamStore, Tensor};

use crate::error::{io_err, Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VQCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Tensors keyed by hierarchical dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StateDict {
    pub tensors: BTreeMap<String, Tensor>,
}

impl StateDict {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// A copy of tensor `name`, which must have `shape`.
    pub fn take(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format { what: "checkpoint", detail: format!("missing tensor `{name}`") })?;
        if t.shape() != shape {
            return Err(Error::Shape(format!(
                "checkpoint tensor `{name}` has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    }

    pub fn put_params(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn get_params(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = self.take(&format!("{prefix}.{}", store.name(id)), store.get(id).shape())?;
            store.set(id, t);
        }
        Ok(())
    }

    /// Stores a list of same-role tensors as `prefix.0`, `prefix.1`, ….
    pub fn put_list(&mut self, prefix: &str, list: &[Tensor]) {
        for (i, t) in list.iter().enumerate() {
            self.insert(format!("{prefix}.{i}"), t.clone());
        }
    }

    pub fn get_list(&self, prefix: &str, like: &[Tensor]) -> Result<Vec<Tensor>> {
        like.iter().enumerate().map(|(i, t)| self.take(&format!("{prefix}.{i}"), t.shape())).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Writes `meta` and `dict` atomically (temporary file, then rename).
pub fn save_checkpoint(path: &Path, meta: &serde_json::Value, dict: &StateDict) -> Result<()> {
    let mut offset = 0;
    let tensors = dict
        .tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
            offset += t.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header { meta: meta.clone(), tensors })?;
    let mut buf = Vec::with_capacity(16 + header.len() + offset * 8);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in dict.tensors.values() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

/// Reads a container written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, StateDict)> {
    let buf = fs::read(path).map_err(io_err(path))?;
    let bad = |detail: String| Error::Format { what: "checkpoint", detail: format!("{}: {detail}", path.display()) };
    if buf.len() < 16 || buf[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing VQCK magic".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let body = buf.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    let data = &buf[16 + hlen..];
    let mut dict = StateDict::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let bytes = data
            .get(e.offset * 8..(e.offset + n) * 8)
            .ok_or_else(|| bad(format!("tensor `{}` runs past the end of the file", e.name)))?;
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        dict.insert(e.name, Tensor::new(&e.shape, values));
    }
    Ok((header.meta, dict))
}

/// Write-to-temporary-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut d = StateDict::new();
        d.insert("a.w", Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0]));
        d.insert("b", Tensor::scalar(7.0));
        let meta = serde_json::json!({"step": 12});
        save_checkpoint(&path, &meta, &d).unwrap();
        let (m, back) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta);
        for (k, t) in &d.tensors {
            let u = &back.tensors[k];
            assert_eq!(t.shape(), u.shape());
            assert!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&path, &serde_json::json!({}), &StateDict::new()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut d = StateDict::new();
        d.insert("x", Tensor::zeros(&[3]));
        assert!(matches!(d.take("x", &[4]), Err(Error::Shape(_))));
        assert!(matches!(d.take("y", &[3]), Err(Error::Format { .. })));
    }
}
