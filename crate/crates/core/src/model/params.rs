use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Ordered collection of named parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    entries: Vec<(String, Tensor<S>)>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Panics when `name` is absent; parameter names are fixed by the
    /// architecture, so a miss is a programming error.
    pub fn expect(&self, name: &str) -> &Tensor<S> {
        self.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Copies the entries whose name starts with one of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> Self {
        let mut out = Self::new();
        for (n, t) in &self.entries {
            if prefixes.iter().any(|p| n.starts_with(p)) {
                out.insert(n.clone(), t.clone());
            }
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (n, t) in &self.entries {
            out.insert(n.clone(), t.cast());
        }
        out
    }

    /// Loads `name` into `g` once; repeated requests share the node.
    pub fn var(&self, g: &mut Graph<S>, name: &str) -> Var {
        g.named_leaf(name, || self.expect(name).clone())
    }

    /// Digest over names, shapes and the `f32` image of every value.
    pub fn digest(&self, h: &mut Sha256) {
        for (n, t) in &self.entries {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_f32_lossy().to_le_bytes());
            }
        }
    }
}
