//! Named parameter and gradient containers.

use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Trainable parameters keyed by path. Iteration order is sorted by name, so
/// optimizer sweeps and checkpoint layouts are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    /// Insert a parameter; `requires_grad` is forced on. Names must be unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.params
            .insert(name.to_string(), tensor.with_requires_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Gradients keyed by parameter path. Keys are always a subset of the store
/// the backward pass ran against, with matching shapes.
#[derive(Debug, Clone, Default)]
pub struct GradientMap<T: Real> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> GradientMap<T> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, grad: Tensor<T>) {
        self.grads.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.grads.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Accumulate `other` into `self`, creating missing entries.
    pub fn add_assign(&mut self, other: &GradientMap<T>) -> Result<()> {
        for (name, g) in other.iter() {
            match self.grads.get_mut(name) {
                Some(mine) => {
                    if mine.shape() != g.shape() {
                        return Err(Error::InvalidShape(format!(
                            "gradient shape mismatch for {name:?}: {:?} vs {:?}",
                            mine.shape(),
                            g.shape()
                        )));
                    }
                    for (a, b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    /// Scale every gradient in place (used for batch-mean reduction).
    pub fn scale(&mut self, factor: T) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * factor;
            }
        }
    }
}
