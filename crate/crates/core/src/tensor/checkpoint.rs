//! `KTLCKPT1` container: magic, u32 manifest length, UTF-8 manifest with
//! one `name\tshape\toffset` line per tensor, then a little-endian f64 blob.
//! Offsets count f64 elements from the start of the blob.

use std::collections::BTreeMap;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::dataset::ByteCursor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KTLCKPT1";

/// Ordered map from namespaced names to tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores every tensor of `store` under `namespace/name`.
    pub fn insert_store(&mut self, namespace: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.insert(format!("{namespace}/{name}"), t.clone());
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Copies `namespace/name` into every tensor of `store`.
    pub fn load_store(&self, namespace: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{namespace}/{}", store.name(id));
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::format("<checkpoint>", format!("missing tensor {key}")))?;
            store.set(id, t.clone())?;
        }
        Ok(())
    }

    /// Tensors under `namespace/`, with the prefix stripped.
    pub fn namespace(&self, namespace: &str) -> BTreeMap<String, Tensor> {
        let prefix = format!("{namespace}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    pub fn merge(&mut self, other: Checkpoint) {
        self.tensors.extend(other.tensors);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("{name}\t{}\t{offset}\n", shape.join(",")));
            offset += t.len();
        }
        let mut out = Vec::with_capacity(12 + manifest.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format(path, r.to_string());
        let mut cur = ByteCursor::new(bytes, path);
        if cur.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let mlen = cur.u32()? as usize;
        let manifest =
            std::str::from_utf8(cur.take(mlen)?).map_err(|_| bad("manifest is not UTF-8"))?;
        let blob = cur.rest();
        if blob.len() % 8 != 0 {
            return Err(bad("blob length not a multiple of 8"));
        }
        let mut tensors = BTreeMap::new();
        for line in manifest.lines() {
            let mut it = line.split('\t');
            let (Some(name), Some(shape), Some(off), None) = (it.next(), it.next(), it.next(), it.next())
            else {
                return Err(bad("malformed manifest line"));
            };
            let shape: Vec<usize> = if shape.is_empty() {
                Vec::new()
            } else {
                shape
                    .split(',')
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("bad shape"))?
            };
            let off: usize = off.parse().map_err(|_| bad("bad offset"))?;
            let n: usize = shape.iter().product();
            let end = (off + n) * 8;
            if end > blob.len() {
                return Err(bad("tensor past end of blob"));
            }
            let data = blob[off * 8..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name.to_string(), Tensor::new(&shape, data)?);
        }
        Ok(Self { tensors })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&std::fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut c = Checkpoint::new();
        c.insert("A/w", Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        c.insert("A/s", Tensor::scalar(std::f64::consts::PI));
        c.insert("B/e", Tensor::zeros(&[0]));
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get("A/w").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.namespace("A").len(), 2);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::full(&[3], 1.0));
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8], Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, Path::new("x")).is_err());
    }
}
