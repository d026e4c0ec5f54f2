//! Named parameter sets and the on-disk checkpoint format.
//!
//! A checkpoint is a single file: magic, version, a JSON config header, then
//! each parameter as `name, dims, f32 little-endian data`. Parameters are kept
//! in a `BTreeMap` so every iteration order (saving, loading into a tape,
//! optimizer updates) is deterministic.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Var};

const CKPT_MAGIC: u32 = 0x4b43_5645; // "EVCK"
const CKPT_VERSION: u32 = 1;

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.map.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.map.iter_mut()
    }

    /// Total scalar count across all tensors.
    pub fn num_values(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Merge another set under a distinct namespace (panics on collisions).
    pub fn absorb(&mut self, other: ParamSet) {
        for (k, v) in other.map {
            self.insert(k, v);
        }
    }

    pub fn save(&self, path: &Path, header: &serde_json::Value) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_u32::<LittleEndian>(CKPT_MAGIC)?;
        f.write_u32::<LittleEndian>(CKPT_VERSION)?;
        let header = serde_json::to_vec(header).expect("header serialization");
        f.write_u32::<LittleEndian>(header.len() as u32)?;
        f.write_all(&header)?;
        f.write_u32::<LittleEndian>(self.map.len() as u32)?;
        for (name, value) in &self.map {
            f.write_u32::<LittleEndian>(name.len() as u32)?;
            f.write_all(name.as_bytes())?;
            f.write_u32::<LittleEndian>(value.ndim() as u32)?;
            for d in value.shape() {
                f.write_u32::<LittleEndian>(*d as u32)?;
            }
            for v in value.iter() {
                f.write_f32::<LittleEndian>(*v as f32)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ParamSet, serde_json::Value)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let bad = |reason: String| Error::Format {
            path: path.display().to_string(),
            reason,
        };
        if f.read_u32::<LittleEndian>()? != CKPT_MAGIC {
            return Err(bad("not a checkpoint (magic mismatch)".into()));
        }
        if f.read_u32::<LittleEndian>()? != CKPT_VERSION {
            return Err(bad("unsupported checkpoint version".into()));
        }
        let hlen = f.read_u32::<LittleEndian>()? as usize;
        let mut hbuf = vec![0u8; hlen];
        f.read_exact(&mut hbuf)?;
        let header: serde_json::Value =
            serde_json::from_slice(&hbuf).map_err(|e| bad(format!("bad header: {e}")))?;
        let count = f.read_u32::<LittleEndian>()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let nlen = f.read_u32::<LittleEndian>()? as usize;
            let mut nbuf = vec![0u8; nlen];
            f.read_exact(&mut nbuf)?;
            let name =
                String::from_utf8(nbuf).map_err(|_| bad("non-utf8 parameter name".into()))?;
            let ndim = f.read_u32::<LittleEndian>()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(f.read_u32::<LittleEndian>()? as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f.read_f32::<LittleEndian>()? as f64);
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| bad(format!("bad tensor {name}: {e}")))?;
            set.insert(name, arr);
        }
        Ok((set, header))
    }
}

/// Tape handles for a loaded [`ParamSet`].
pub struct VarMap {
    map: BTreeMap<String, Var>,
}

impl VarMap {
    pub fn from_map(map: BTreeMap<String, Var>) -> VarMap {
        VarMap { map }
    }

    /// Loads every parameter onto the tape as a leaf.
    pub fn load(tape: &mut Tape, params: &ParamSet) -> VarMap {
        let mut map = BTreeMap::new();
        for (name, value) in params.iter() {
            map.insert(name.clone(), tape.constant(value.clone()));
        }
        VarMap { map }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Collects gradients for every parameter that received one.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.map {
            if let Some(g) = grads.wrt(*var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn checkpoint_round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut ps = ParamSet::new();
        ps.insert("layer.w", arr2(&[[0.5f64, -1.25], [3.0, 0.0]]).into_dyn());
        ps.insert("layer.b", ndarray::arr1(&[0.125f64]).into_dyn());
        let header = serde_json::json!({"stage": "flow", "k": 4});
        ps.save(&path, &header).unwrap();
        let (back, h2) = ParamSet::load(&path).unwrap();
        assert_eq!(h2["stage"], "flow");
        assert_eq!(back.len(), 2);
        assert_eq!(back.get("layer.w").unwrap(), ps.get("layer.w").unwrap());
        assert_eq!(back.get("layer.b").unwrap(), ps.get("layer.b").unwrap());
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            ParamSet::load(&path),
            Err(Error::Format { .. })
        ));
    }
}
