//! "FDCK" named-tensor checkpoints.
//!
//! Layout: `"FDCK" | u32 version | u32 count`, then per tensor
//! `u32 name_len | name (utf-8) | u32 rank | rank × u32 dims | f32 LE data`.

use std::path::Path;

use ndcore::{ParamStore, Tensor};

use crate::error::{contract, Error, Result};
use crate::synthdata::ByteReader;

pub const FDCK_MAGIC: &[u8; 4] = b"FDCK";
pub const FDCK_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Every parameter of `store`, named `{prefix}{param name}`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) {
        for e in store.entries() {
            self.push(format!("{prefix}{}", e.name), e.value.clone());
        }
    }

    /// Overwrites each parameter of `store` from `{prefix}{name}`. Missing
    /// names and shape changes are errors.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}{}", store.entry(id).name);
            let Some(t) = self.get(&name) else {
                return contract(format!("checkpoint has no tensor {name:?}"));
            };
            if t.shape() != store.get(id).shape() {
                return contract(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    store.get(id).shape()
                ));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FDCK_MAGIC);
        out.extend_from_slice(&FDCK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != FDCK_MAGIC {
            return r.fail(0, "bad magic, expected \"FDCK\"");
        }
        let version = r.u32("version")?;
        if version != FDCK_VERSION {
            return r.fail(4, format!("unsupported version {version}"));
        }
        let count = r.u32("count")?;
        let mut ck = Checkpoint::new();
        for i in 0..count {
            let len = r.u32(&format!("name length of tensor {i}"))? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::Format {
                    offset: at as u64,
                    message: "tensor name is not utf-8".into(),
                })?
                .to_string();
            let rank = r.u32(&format!("rank of {name}"))? as usize;
            let shape = (0..rank).map(|_| r.u32(&format!("dims of {name}")).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let at = r.pos;
            let data = (0..n).map(|_| r.f32(&format!("data of {name}")).map(f64::from)).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Format {
                offset: at as u64,
                message: format!("{name}: {e}"),
            })?;
            ck.push(name, t);
        }
        if r.pos != bytes.len() {
            return r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Rounds every parameter to the nearest f32, which is what a checkpoint
/// round trip does.
pub fn quantize_store(store: &mut ParamStore) {
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_for_f32_values() {
        let mut ck = Checkpoint::new();
        ck.push("a.weight", Tensor::new([2, 3], vec![0.5, -1.25, 3.0, 1e-3f32 as f64, 0.0, 7.0]).unwrap());
        ck.push("s", Tensor::scalar(2.0));
        assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let mut ck = Checkpoint::new();
        ck.push("w", Tensor::zeros([2]));
        let bytes = ck.encode();
        let err = Checkpoint::decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 29, .. }), "{err}");
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn store_load_checks_names_and_shapes() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::full([2, 2], 3.0));
        let mut ck = Checkpoint::new();
        ck.add_store("m.", &store);
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros([2, 2]));
        ck.load_store("m.", &mut other).unwrap();
        assert_eq!(other.entries()[0].value, Tensor::full([2, 2], 3.0));
        let mut wrong = ParamStore::new();
        wrong.add("w", Tensor::zeros([4]));
        assert!(ck.load_store("m.", &mut wrong).is_err());
        assert!(ck.load_store("x.", &mut other).is_err());
    }
}
