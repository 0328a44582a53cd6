//! Named parameter storage and the per-forward binding of parameters to graph leaves.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Prefix shared by every adapter parameter name.
pub const ADAPTER_PREFIX: &str = "adapter.";

/// Parameters keyed by dotted name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Order-sensitive digest of every name and tensor bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0x84222325cbf29ce4;
        for (name, t) in &self.tensors {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
            h = (h ^ t.checksum()).wrapping_mul(0x100000001b3);
        }
        h
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Which parameters become gradient-collecting leaves during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Trainable {
    Nothing,
    /// Only names under [`ADAPTER_PREFIX`].
    Adapters,
    /// Every parameter except names starting with one of the listed prefixes.
    AllExcept(Vec<String>),
}

impl Trainable {
    pub fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Adapters => name.starts_with(ADAPTER_PREFIX),
            Trainable::AllExcept(frozen) => !frozen.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Maps parameter names to graph leaves, creating each leaf on first use.
#[derive(Debug)]
pub struct Binder {
    vars: HashMap<String, Var>,
    trainable: Trainable,
}

impl Binder {
    pub fn new(trainable: Trainable) -> Self {
        Self {
            vars: HashMap::new(),
            trainable,
        }
    }

    pub fn eval() -> Self {
        Self::new(Trainable::Nothing)
    }

    /// Pre-binds `name` to an existing leaf (used by gradient checks).
    pub fn preset(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn bind(&mut self, g: &mut Graph, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let v = g.param(value, self.trainable.allows(name));
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn bind_from(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        Ok(self.bind(g, name, t))
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn trainable(&self) -> &Trainable {
        &self.trainable
    }
}
