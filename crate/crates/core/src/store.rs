//! Write-once array store: raw little-endian `f64` files with JSON sidecars.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const DTYPE: &str = "f64-le";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArtifactKey {
    pub module: String,
    pub name: String,
    pub order: usize,
    /// `minus`, `plus`, or absent for interior fields.
    pub wall: Option<String>,
    /// Stored-time index.
    pub time: Option<usize>,
}

impl ArtifactKey {
    pub fn new(module: &str, name: &str, order: usize) -> Self {
        ArtifactKey { module: module.into(), name: name.into(), order, wall: None, time: None }
    }

    pub fn wall(mut self, w: &str) -> Self {
        self.wall = Some(w.into());
        self
    }

    pub fn at(mut self, k: usize) -> Self {
        self.time = Some(k);
        self
    }

    pub fn stem(&self) -> String {
        let mut s = format!("{}-{}-o{}", self.module, self.name, self.order);
        if let Some(w) = &self.wall {
            s.push('-');
            s.push_str(w);
        }
        if let Some(t) = self.time {
            s.push_str(&format!("-t{t:05}"));
        }
        s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub key: ArtifactKey,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub grid_hash: String,
    pub op_id: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode(data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * data.len());
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Store(format!("{}: {e}", path.display()))
}

/// Single-writer store rooted at a directory.
pub struct ArtifactStore {
    root: PathBuf,
    index: BTreeMap<String, Sidecar>,
}

impl ArtifactStore {
    /// Open or create the store, reading any sidecars already present.
    pub fn open(root: &Path) -> Result<Self> {
        let arrays = root.join("arrays");
        fs::create_dir_all(&arrays).map_err(io(&arrays))?;
        let mut index = BTreeMap::new();
        for entry in fs::read_dir(&arrays).map_err(io(&arrays))? {
            let p = entry.map_err(io(&arrays))?.path();
            if p.extension().is_some_and(|e| e == "json") {
                let text = fs::read_to_string(&p).map_err(io(&p))?;
                let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Store(format!("{}: {e}", p.display())))?;
                index.insert(sc.key.stem(), sc);
            }
        }
        Ok(ArtifactStore { root: root.to_path_buf(), index })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &Sidecar> {
        self.index.values()
    }

    pub fn contains(&self, key: &ArtifactKey) -> bool {
        self.index.contains_key(&key.stem())
    }

    fn paths(&self, stem: &str) -> (PathBuf, PathBuf) {
        let a = self.root.join("arrays");
        (a.join(format!("{stem}.f64")), a.join(format!("{stem}.json")))
    }

    pub fn put(&mut self, key: ArtifactKey, shape: &[usize], data: &[f64], grid_hash: &str, op_id: &str) -> Result<Sidecar> {
        let stem = key.stem();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Store(format!("{stem}: shape {shape:?} does not match {} values", data.len())));
        }
        let (bin, meta) = self.paths(&stem);
        if self.index.contains_key(&stem) || bin.exists() || meta.exists() {
            return Err(Error::Store(format!("{stem} is already stored (the store is write-once)")));
        }
        let bytes = encode(data);
        let sc = Sidecar {
            key,
            shape: shape.to_vec(),
            dtype: DTYPE.into(),
            grid_hash: grid_hash.into(),
            op_id: op_id.into(),
            sha256: sha256_hex(&bytes),
        };
        fs::write(&bin, &bytes).map_err(io(&bin))?;
        let json = serde_json::to_string_pretty(&sc).map_err(|e| Error::Store(e.to_string()))?;
        fs::write(&meta, json).map_err(io(&meta))?;
        self.index.insert(stem, sc.clone());
        Ok(sc)
    }

    /// Load an array after checking it against its sidecar.
    pub fn get(&self, key: &ArtifactKey) -> Result<(Sidecar, Vec<f64>)> {
        let stem = key.stem();
        let sc = self.index.get(&stem).ok_or_else(|| Error::Store(format!("{stem} is not stored")))?;
        let (bin, _) = self.paths(&stem);
        let bytes = fs::read(&bin).map_err(io(&bin))?;
        if sc.dtype != DTYPE {
            return Err(Error::Store(format!("{stem}: unknown dtype {}", sc.dtype)));
        }
        if sha256_hex(&bytes) != sc.sha256 {
            return Err(Error::Store(format!("{stem}: content hash mismatch")));
        }
        let n: usize = sc.shape.iter().product();
        if bytes.len() != 8 * n {
            return Err(Error::Store(format!("{stem}: {} bytes for shape {:?}", bytes.len(), sc.shape)));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((sc.clone(), data))
    }

    /// Re-read every array and check its hash and shape.
    pub fn verify_all(&self) -> Result<usize> {
        for sc in self.index.values() {
            self.get(&sc.key)?;
        }
        Ok(self.index.len())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let p = self.root.join(name);
        let json = serde_json::to_string_pretty(value).map_err(|e| Error::Store(e.to_string()))?;
        fs::write(&p, json + "\n").map_err(io(&p))?;
        Ok(p)
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        let p = self.root.join(name);
        let text = fs::read_to_string(&p).map_err(io(&p))?;
        serde_json::from_str(&text).map_err(|e| Error::Store(format!("{}: {e}", p.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn write_once_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ArtifactStore::open(dir.path()).unwrap();
        let k = ArtifactKey::new("interior", "theta", 0).at(3);
        s.put(k.clone(), &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, -0.0], "g", "op").unwrap();
        assert!(matches!(s.put(k.clone(), &[2, 3], &[0.0; 6], "g", "op"), Err(Error::Store(_))));
        assert!(s.put(ArtifactKey::new("a", "b", 1), &[4], &[0.0; 3], "g", "op").is_err());
        let reopened = ArtifactStore::open(dir.path()).unwrap();
        let (sc, data) = reopened.get(&k).unwrap();
        assert_eq!(sc.shape, vec![2, 3]);
        assert_eq!(data[5].to_bits(), (-0.0f64).to_bits());
        assert_eq!(reopened.verify_all().unwrap(), 1);
        // corrupt the payload
        let bin = dir.path().join("arrays").join(format!("{}.f64", k.stem()));
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(reopened.verify_all().is_err());
    }

    #[test]
    fn stems_are_distinct() {
        let a = ArtifactKey::new("layer", "u1", 1).wall("minus").at(2).stem();
        let b = ArtifactKey::new("layer", "u1", 1).wall("plus").at(2).stem();
        assert_ne!(a, b);
        assert_eq!(a, "layer-u1-o1-minus-t00002");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn arrays_roundtrip_bitwise(v in proptest::collection::vec(proptest::num::f64::ANY, 0..40)) {
            let dir = tempfile::tempdir().unwrap();
            let mut s = ArtifactStore::open(dir.path()).unwrap();
            let k = ArtifactKey::new("x", "y", 0);
            s.put(k.clone(), &[v.len()], &v, "g", "op").unwrap();
            let (_, back) = s.get(&k).unwrap();
            prop_assert!(back.iter().zip(&v).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.len(), v.len());
        }
    }
}
