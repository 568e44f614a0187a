use std::collections::{BTreeMap, BTreeSet};

use super::graph::{Graph, TensorData, Var};
use super::{Real, Result, TensorError};

/// Named parameter store with a frozen set. Frozen parameters are registered
/// into graphs with `needs_grad = false` and never receive optimizer updates.
#[derive(Clone)]
pub struct ParamRegistry<T> {
    params: BTreeMap<String, TensorData<T>>,
    frozen: BTreeSet<String>,
}

impl<T: Real> Default for ParamRegistry<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamRegistry<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: TensorData<T>) {
        self.params.insert(name.to_owned(), value);
    }

    pub fn get(&self, name: &str) -> Result<&TensorData<T>> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut TensorData<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_owned()))
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.params.contains_key(name) {
            return Err(TensorError::UnknownParameter(name.to_owned()));
        }
        self.frozen.insert(name.to_owned());
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .keys()
            .filter(|n| !self.frozen.contains(*n))
            .map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorData<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Insert this parameter into a graph as a named leaf. Frozen parameters
    /// participate in the forward pass but receive no gradient entry.
    pub fn leaf(&self, graph: &mut Graph<T>, name: &str) -> Result<Var> {
        let value = self.get(name)?.clone();
        let trainable = !self.is_frozen(name);
        Ok(graph.leaf(value, trainable, Some(name)))
    }
}

/// Mini-batch SGD with classical momentum. Velocity state is keyed by
/// parameter name; frozen parameters are skipped outright.
pub struct SgdMomentum<T> {
    lr: T,
    momentum: T,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr: T::from_f64(lr),
            momentum: T::from_f64(momentum),
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        registry: &mut ParamRegistry<T>,
        grads: &BTreeMap<String, TensorData<T>>,
    ) -> Result<()> {
        for (name, grad) in grads {
            if registry.is_frozen(name) {
                continue;
            }
            let param = registry.get_mut(name)?;
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); grad.numel()]);
            for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(vel) {
                *v = self.momentum * *v + g;
                *p = *p - self.lr * *v;
            }
        }
        Ok(())
    }
}
