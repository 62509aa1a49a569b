use rand::Rng;
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters.
///
/// Insertion order is the canonical order for serialization, hashing and
/// optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Param { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    /// Glorot-uniform `[fan_in, fan_out]` weight.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        let value = Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape");
        self.add(name, value, true)
    }

    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> ParamId {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
        let value = Tensor::new(shape.to_vec(), data).expect("uniform shape");
        self.add(name, value, true)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], fill: f64) -> ParamId {
        let numel = shape.iter().product();
        let value = Tensor::new(shape.to_vec(), vec![fill; numel]).expect("const shape");
        self.add(name, value, true)
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

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.entries {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Copies values for every parameter whose name exists in `other` with
    /// the same shape. Returns the names that were copied.
    pub fn copy_matching(&mut self, other: &ParamStore, prefixes: &[&str]) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for p in &mut self.entries {
            if !prefixes.iter().any(|pre| p.name.starts_with(pre)) {
                continue;
            }
            let Some(src) = other.find(&p.name) else {
                return Err(Error::Checkpoint(format!("parameter {} missing from source", p.name)));
            };
            let src = other.get(src);
            if src.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} shape {:?} != {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
            copied.push(p.name.clone());
        }
        Ok(copied)
    }

    /// SHA-256 over names, shapes and little-endian values of the parameters
    /// whose names start with any of `prefixes` (all when empty).
    pub fn hash(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for p in &self.entries {
            if !prefixes.is_empty() && !prefixes.iter().any(|pre| p.name.starts_with(pre)) {
                continue;
            }
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
