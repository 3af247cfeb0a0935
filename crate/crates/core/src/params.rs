use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Sgd, Tensor, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Parameters placed on a graph for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Count over names starting with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Adds every tensor to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), g.leaf(t.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    /// One optimizer step using the gradients of the bound leaves.
    pub fn apply(&mut self, opt: &mut Sgd, g: &Graph, bound: &Bound, grads: &Gradients, lr: f64) -> Result<()> {
        let names: Vec<String> = self.tensors.keys().cloned().collect();
        let gs: Vec<Tensor> = names.iter().map(|n| grads.wrt(g, bound.get(n))).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut ps: Vec<&mut Tensor> = self.tensors.values_mut().collect();
        opt.step(&mut ps, &gs, lr, &name_refs)
    }

    /// Little-endian bytes of every tensor in name order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (n, t) in &self.tensors {
            out.extend_from_slice(n.as_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.tensors.iter().find(|(_, t)| !t.all_finite()) {
            Some((n, _)) => Err(Error::NonFinite(format!("parameter {n}"))),
            None => Ok(()),
        }
    }
}
