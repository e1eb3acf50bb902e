//! Named parameter and buffer stores.
//!
//! Parameters live in a [`ParamStore`] keyed by dot-separated hierarchical
//! names with deterministic (lexicographic) iteration. Non-differentiable
//! state that must persist across steps (batch-norm running statistics) lives
//! in a [`StateStore`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Default, Clone)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.entries
            .insert(name.to_string(), value.with_requires_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Lexicographic iteration; the order is part of the determinism
    /// contract.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let t = self.get_mut(name)?;
        t.accumulate_grad(grad);
        Ok(())
    }

    /// Gives every parameter a gradient slot (zeros where absent).
    pub fn ensure_grad_slots(&mut self) {
        for t in self.entries.values_mut() {
            if t.grad().is_none() {
                t.zero_grad();
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    pub fn total_params(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }
}

#[derive(Default, Clone)]
pub struct StateStore {
    entries: BTreeMap<String, Tensor>,
}

impl StateStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        self.entries.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }
}

/// Kaiming-style fan-in initialization for a (fan_in, fan_out) weight.
pub fn init_linear_weight(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::randn(&[fan_in, fan_out], std, rng)
}

/// Kaiming-style init for a (KH, KW, Cin, Cout) convolution kernel.
pub fn init_conv_weight(
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    rng: &mut impl Rng,
) -> Tensor {
    let fan_in = (kh * kw * cin) as f64;
    let std = (2.0 / fan_in).sqrt();
    Tensor::randn(&[kh, kw, cin, cout], std, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_sorted() {
        let mut store = ParamStore::new();
        store.register("b.w", Tensor::zeros(&[1])).unwrap();
        store.register("a.w", Tensor::zeros(&[1])).unwrap();
        assert!(store.register("a.w", Tensor::zeros(&[1])).is_err());
        let names = store.names();
        assert_eq!(names, vec!["a.w".to_string(), "b.w".to_string()]);
    }

    #[test]
    fn ensure_grad_slots_zero_fills() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::ones(&[2])).unwrap();
        store.ensure_grad_slots();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[0.0, 0.0]);
    }
}
