use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Named parameter tensors plus the set of names excluded from updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    params: BTreeMap<String, Tensor<F>>,
    frozen: BTreeSet<String>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    /// Inserts a parameter. Re-inserting an existing name replaces its value.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor<F>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::NameMismatch(format!("no parameter named `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if !self.params.contains_key(name) {
            return Err(Error::NameMismatch(format!("cannot freeze unknown `{name}`")));
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    /// Freezes every parameter whose name starts with `prefix`; returns how many.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let names: Vec<String> = self
            .params
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        let n = names.len();
        self.frozen.extend(names);
        n
    }

    /// Freezes everything except parameters whose name starts with `prefix`.
    pub fn freeze_all_except(&mut self, prefix: &str) {
        let names: Vec<String> = self
            .params
            .keys()
            .filter(|k| !k.starts_with(prefix))
            .cloned()
            .collect();
        self.frozen.extend(names);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn freeze_mask(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn set_freeze_mask(&mut self, mask: BTreeSet<String>) {
        self.frozen = mask;
    }

    /// Sets every gradient buffer to zeros.
    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.grad = None;
        }
    }

    /// Accumulates `grad` into the named parameter's buffer.
    pub fn add_grad(&mut self, name: &str, grad: &[F]) -> Result<()> {
        let t = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::NameMismatch(format!("no parameter named `{name}`")))?;
        if grad.len() != t.numel() {
            return Err(Error::DimensionMismatch(format!(
                "gradient for `{name}` has {} values, parameter has {}",
                grad.len(),
                t.numel()
            )));
        }
        match &mut t.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(grad) {
                    *a += *b;
                }
            }
            None => t.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    /// Global L2 norm over all populated gradients of trainable parameters.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|(k, _)| !self.frozen.contains(*k))
            .filter_map(|(_, t)| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = F::from_f64_lossy(max_norm / norm);
            for (k, t) in self.params.iter_mut() {
                if self.frozen.contains(k) {
                    continue;
                }
                if let Some(g) = &mut t.grad {
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        norm
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            frozen: self.frozen.clone(),
        }
    }
}
