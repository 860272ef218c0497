//! Named parameter storage with gradient slots.

use std::collections::BTreeMap;
use std::ops::Index;

use serde::{Deserialize, Serialize};

use super::tape::{Grads, Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Named tensors plus a gradient slot of the same shape for each.
///
/// Names iterate in lexicographic order, which fixes the reduction order
/// for aggregation and the traversal order for gradient checks.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    #[serde(skip)]
    grads: BTreeMap<String, Tensor>,
}

/// Model parameters exchanged between clients and the server.
pub type ModelParameters = ParamStore;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.values.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter `{name}`")));
        }
        self.grads.insert(name.clone(), Tensor::zeros(value.rows(), value.cols()));
        self.values.insert(name, value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_entries(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.values.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn grad_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.grads.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &mut Tensor)> {
        self.values
            .iter_mut()
            .zip(self.grads.values_mut())
            .map(|((k, v), g)| (k.as_str(), v, g))
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.values.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect();
        Bound { vars }
    }

    /// Records every parameter as a constant, for inference-only passes.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self.values.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect();
        Bound { vars }
    }

    /// Adds the gradients found in `grads` into the gradient slots.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Grads) {
        for (name, var) in &bound.vars {
            if let (Some(g), Some(slot)) = (grads.get(*var), self.grads.get_mut(name)) {
                slot.add_assign(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.values_mut().for_each(|g| g.fill(0.0));
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            self.grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
        norm
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::Shape(format!(
                "parameter count {} vs {}",
                self.values.len(),
                other.values.len()
            )));
        }
        for (name, v) in &self.values {
            match other.values.get(name) {
                None => return Err(Error::Shape(format!("parameter `{name}` missing"))),
                Some(o) if o.shape() != v.shape() => {
                    return Err(Error::Shape(format!(
                        "parameter `{name}`: {:?} vs {:?}",
                        v.shape(),
                        o.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Largest entry-wise absolute difference to a compatible store.
    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.values
            .iter()
            .map(|(k, v)| other.values.get(k).map_or(f64::INFINITY, |o| v.max_abs_diff(o)))
            .fold(0.0, f64::max)
    }

    /// Re-creates zeroed gradient slots, e.g. after deserialization.
    pub fn reset_grad_slots(&mut self) {
        self.grads = self
            .values
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.rows(), v.cols())))
            .collect();
    }
}

/// Parameter name → tape variable, for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl Index<&str> for Bound {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::zeros(1, 2)).unwrap();
        assert!(p.insert("a", Tensor::zeros(1, 2)).is_err());
    }

    #[test]
    fn gradient_slots_match_values() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::zeros(3, 4)).unwrap();
        assert_eq!(p.grad("w").unwrap().shape(), &[3, 4]);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::zeros(1, 2)).unwrap();
        p.grad_mut("w").unwrap().data_mut().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(p.clip_grad_norm(1.0), 5.0);
        assert!((p.grad_norm() - 1.0).abs() < 1e-15);
    }
}
