use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Named tensors in a deterministic (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::shape(format!("no tensor named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::shape(format!("no tensor named `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
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

    /// Adds `tensor` into the slot `name`, creating it if absent.
    pub fn accumulate(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(slot) => slot
                .add_assign(tensor)
                .map_err(|e| Error::shape(format!("gradient `{name}`: {e}"))),
            None => {
                self.tensors.insert(name.to_string(), tensor.clone());
                Ok(())
            }
        }
    }

    /// Adds every tensor of `other` in name order.
    pub fn accumulate_all(&mut self, other: &Params) -> Result<()> {
        for (name, t) in other.iter() {
            self.accumulate(name, t)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            t.scale(factor);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}
