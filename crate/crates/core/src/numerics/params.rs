use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// One named parameter tensor. Frozen parameters never receive gradients and
/// are never touched by the optimizer.
#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub frozen: bool,
}

/// Ordered, named collection of parameter tensors. Insertion order is the
/// canonical order used by checkpoints and the optimizer, so runs are
/// reproducible independent of map iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S: Scalar> {
    params: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>, frozen: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(CoreError::Config(format!("duplicate parameter '{name}'")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            tensor,
            frozen,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<S>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| CoreError::Config(format!("unknown parameter '{name}'")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| CoreError::Config(format!("unknown parameter '{name}'")))?;
        Ok(&mut self.params[i].tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter().filter(|p| !p.frozen)
    }

    /// Flip the frozen flag on every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in self.params.iter_mut() {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Merge another set under a name prefix.
    pub fn absorb(&mut self, prefix: &str, other: &ParamSet<S>, frozen: bool) -> Result<()> {
        for p in other.iter() {
            self.insert(&format!("{prefix}{}", p.name), p.tensor.clone(), frozen)?;
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for p in self.iter() {
            out.insert(&p.name, p.tensor.cast::<T>(), p.frozen).unwrap();
        }
        out
    }

    /// Total scalar counts: (trainable, frozen).
    pub fn count_scalars(&self) -> (usize, usize) {
        let mut t = 0;
        let mut f = 0;
        for p in self.iter() {
            if p.frozen {
                f += p.tensor.len();
            } else {
                t += p.tensor.len();
            }
        }
        (t, f)
    }
}

/// Gradients keyed by parameter name. Keys mirror the trainable subset of the
/// originating ParamSet; frozen parameters have no entry.
#[derive(Debug, Clone, Default)]
pub struct GradSet<S: Scalar> {
    order: Vec<String>,
    map: HashMap<String, Tensor<S>>,
}

impl<S: Scalar> GradSet<S> {
    pub fn new() -> Self {
        GradSet {
            order: Vec::new(),
            map: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, grad: Tensor<S>) {
        if let Some(existing) = self.map.get_mut(name) {
            existing.add_assign(&grad);
        } else {
            self.order.push(name.to_string());
            self.map.insert(name.to_string(), grad);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.order.iter().map(|n| (n.as_str(), &self.map[n]))
    }

    /// Global L2 norm over all entries, computed in f64.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for name in &self.order {
            for v in self.map[name].data() {
                let x = v.to_f64();
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    /// Scale every gradient so the global norm is at most `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = S::from_f64(max_norm / norm);
            for name in &self.order {
                for v in self.map.get_mut(name).unwrap().data_mut() {
                    *v = v.mul(scale);
                }
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Tensor::zeros(&[2]), false).unwrap();
        assert!(ps.insert("w", Tensor::zeros(&[2]), false).is_err());
    }

    #[test]
    fn grad_accumulation_adds() {
        let mut gs = GradSet::<f64>::new();
        gs.insert("w", Tensor::filled(&[2], 1.0));
        gs.insert("w", Tensor::filled(&[2], 2.0));
        assert_eq!(gs.get("w").unwrap().data(), &[3.0, 3.0]);
        assert_eq!(gs.len(), 1);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut gs = GradSet::<f64>::new();
        gs.insert("w", Tensor::filled(&[4], 2.0)); // norm 4
        let pre = gs.clip_global_norm(1.0);
        assert!((pre - 4.0).abs() < 1e-12);
        assert!((gs.global_norm() - 1.0).abs() < 1e-12);
    }
}
