use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Named network weights. Iteration order is the lexicographic name order,
/// which keeps optimizers and checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct StoredParams {
    format_version: u32,
    params: Vec<StoredTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    /// Glorot-uniform weight matrix.
    pub fn insert_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let values = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, values)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same names and shapes, all zero, nothing frozen.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.contains(name)
    }

    /// Freeze every parameter whose name starts with one of `prefixes`.
    pub fn freeze_prefixes(&mut self, prefixes: &[&str]) {
        for name in self.tensors.keys() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                self.frozen.insert(name.clone());
            }
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    /// Copy every tensor of `other` whose name matches `prefix`.
    pub fn merge_from(&mut self, other: &ParamSet, prefix: &str) {
        for (name, t) in other.iter() {
            if name.starts_with(prefix) {
                self.tensors.insert(name.to_string(), t.clone());
            }
        }
    }

    /// Bitwise equality of the named tensors in both sets.
    pub fn bit_equal_on(&self, other: &ParamSet, prefixes: &[&str]) -> std::result::Result<(), String> {
        for (name, t) in self.iter() {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let Some(o) = other.get(name) else {
                return Err(name.to_string());
            };
            let same = t.shape() == o.shape()
                && t.values().iter().zip(o.values()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(name.to_string());
            }
        }
        Ok(())
    }

    /// Flatten all values in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.values().flat_map(|t| t.values().iter().copied()).collect()
    }

    pub(crate) fn to_stored(&self) -> StoredParams {
        StoredParams {
            format_version: CHECKPOINT_FORMAT_VERSION,
            params: self
                .tensors
                .iter()
                .map(|(name, t)| StoredTensor {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        }
    }

    pub(crate) fn from_stored(stored: StoredParams, origin: &str) -> Result<Self> {
        if stored.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::parse(
                origin,
                format!(
                    "unsupported checkpoint format_version {} (expected {})",
                    stored.format_version, CHECKPOINT_FORMAT_VERSION
                ),
            ));
        }
        let mut out = ParamSet::new();
        for p in stored.params {
            let t = Tensor::new(p.shape, p.values)
                .map_err(|e| Error::parse(origin, format!("parameter `{}`: {e}", p.name)))?;
            out.insert(p.name, t)
                .map_err(|e| Error::parse(origin, e.to_string()))?;
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_stored()).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: StoredParams =
            serde_json::from_str(text).map_err(|e| Error::parse("<checkpoint>", e.to_string()))?;
        Self::from_stored(stored, "<checkpoint>")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stored: StoredParams = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        Self::from_stored(stored, &path.display().to_string())
    }
}

impl serde::Serialize for ParamSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_stored().serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for ParamSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let stored = StoredParams::deserialize(d)?;
        ParamSet::from_stored(stored, "<checkpoint>").map_err(serde::de::Error::custom)
    }
}
