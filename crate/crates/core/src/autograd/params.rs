use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{ArrayD, IxDyn};

use super::Float;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: ArrayD<T>,
}

/// Named, ordered collection of trainable tensors. A `ParamId` is the
/// identity of a parameter; every use of the same id in a graph aliases the
/// same storage.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Parameter { name, value });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn replace(&mut self, id: ParamId, value: ArrayD<T>) {
        self.entries[id.0].value = value;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Same names and ids with every element converted.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p
                        .value
                        .mapv(|v| U::from_f64(v.to_f64().expect("finite")).expect("representable")),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

const MAGIC: &[u8; 8] = b"FSDETW01";

impl ParamStore<f32> {
    /// Binary archive: magic, entry count, then per entry the name, the
    /// shape and little-endian `f32` data.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for p in &self.entries {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.value.ndim() as u64).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(p.value.len() * 4);
            for v in p.value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a weight archive"));
        }
        let read_u64 = |r: &mut dyn Read| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated archive"))?;
            Ok(u64::from_le_bytes(b))
        };
        let count = read_u64(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u64(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("non-utf8 name"))?;
            let ndim = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw).map_err(|_| bad("truncated tensor"))?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let value = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|_| bad("bad shape"))?;
            store.add(name, value)?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_roundtrip() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", ArrayD::from_elem(IxDyn(&[2, 3]), 1.5)).unwrap();
        store.add("b.weight", ArrayD::from_elem(IxDyn(&[4]), -0.25)).unwrap();
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (id, p) in store.iter() {
            assert_eq!(back.get(id).name, p.name);
            assert_eq!(back.get(id).value, p.value);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", ArrayD::zeros(IxDyn(&[1]))).unwrap();
        assert!(store.add("w", ArrayD::zeros(IxDyn(&[1]))).is_err());
    }
}
