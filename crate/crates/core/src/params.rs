//! Named parameters and their binding onto a [`Tape`].

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which section of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainTag {
    Base,
    /// Index of the domain in the stream (always >= 1 for deltas).
    Domain(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub tensor: Tensor,
    pub name: String,
    pub trainable: bool,
    pub domain_tag: DomainTag,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor, domain_tag: DomainTag) -> Self {
        Self {
            tensor,
            name: name.into(),
            trainable: true,
            domain_tag,
        }
    }
}

/// An ordered (lexicographic by name) collection of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Parameter) {
        self.params.insert(p.name.clone(), p);
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn set_trainable(&mut self, on: bool) {
        for p in self.params.values_mut() {
            p.trainable = on;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.zero_grad();
        }
    }
}

/// Records which parameters were placed on a tape so their gradients can be
/// collected after `backward`.
#[derive(Debug, Default)]
pub struct Binder {
    grad_enabled: bool,
    bound: BTreeMap<String, Var>,
}

impl Binder {
    /// `grad_enabled = false` places every parameter as a constant.
    pub fn new(grad_enabled: bool) -> Self {
        Self {
            grad_enabled,
            bound: BTreeMap::new(),
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, p: &Parameter) -> Var {
        if let Some(&v) = self.bound.get(&p.name) {
            return v;
        }
        let rg = self.grad_enabled && p.trainable;
        let mut t = p.tensor.clone();
        t.set_requires_grad(rg);
        let v = tape.leaf(t);
        self.bound.insert(p.name.clone(), v);
        v
    }

    pub fn bind_name(&mut self, tape: &mut Tape, set: &ParamSet, name: &str) -> Result<Var> {
        Ok(self.bind(tape, set.get(name)?))
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Accumulates tape gradients into the matching trainable parameters of `set`.
    pub fn collect_grads(&self, tape: &Tape, set: &mut ParamSet) {
        for (name, &v) in &self.bound {
            if let (Ok(p), Some(g)) = (set.get_mut(name), tape.grad(v)) {
                if p.trainable {
                    p.tensor.accumulate_grad(g);
                }
            }
        }
    }
}

/// 64-bit FNV-1a over a byte stream.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
