//! Named trainable tensors grouped for freezing.

use crate::tensor::Tensor;
use rand::Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),
    #[error("duplicate parameter `{0}`")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Parameters in insertion order, with per-group frozen flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    frozen: BTreeMap<String, bool>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, group: &str, name: &str, value: Tensor) -> Result<ParamId, ParamError> {
        if self.by_name.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            group: group.to_string(),
            value,
            grad,
        });
        self.by_name.insert(name.to_string(), id);
        self.frozen.entry(group.to_string()).or_insert(false);
        Ok(id)
    }

    /// Weight matrix drawn uniformly from `[-scale, scale]`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        group: &str,
        name: &str,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> Result<ParamId, ParamError> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.insert(group, name, Tensor::new(shape.to_vec(), data))
    }

    pub fn insert_zeros(&mut self, group: &str, name: &str, shape: &[usize]) -> Result<ParamId, ParamError> {
        self.insert(group, name, Tensor::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].grad.data_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn groups(&self) -> impl Iterator<Item = &str> {
        self.frozen.keys().map(String::as_str)
    }

    pub fn has_group(&self, group: &str) -> bool {
        self.frozen.contains_key(group)
    }

    /// Marks a group so the optimizer leaves it untouched. Gradients still
    /// flow through (and accumulate into) frozen parameters.
    pub fn freeze(&mut self, group: &str) -> Result<(), ParamError> {
        match self.frozen.get_mut(group) {
            Some(f) => {
                *f = true;
                Ok(())
            }
            None => Err(ParamError::UnknownGroup(group.to_string())),
        }
    }

    pub fn unfreeze(&mut self, group: &str) -> Result<(), ParamError> {
        match self.frozen.get_mut(group) {
            Some(f) => {
                *f = false;
                Ok(())
            }
            None => Err(ParamError::UnknownGroup(group.to_string())),
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[&self.params[id.0].group]
    }

    pub fn group_frozen(&self, group: &str) -> Option<bool> {
        self.frozen.get(group).copied()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count of parameters in unfrozen groups.
    pub fn trainable_scalar_count(&self) -> usize {
        self.iter()
            .filter(|(id, _)| !self.is_frozen(*id))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn group_scalar_count(&self, group: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Copies every parameter of `group` from `src`, checking names and shapes.
    pub fn copy_group_from(&mut self, src: &ParameterStore, group: &str) -> Result<(), ParamError> {
        if !src.has_group(group) {
            return Err(ParamError::UnknownGroup(group.to_string()));
        }
        for p in src.params.iter().filter(|p| p.group == group) {
            let id = self
                .id(&p.name)
                .ok_or_else(|| ParamError::UnknownParam(p.name.clone()))?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != p.value.shape() {
                return Err(ParamError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: dst.value.shape().to_vec(),
                    found: p.value.shape().to_vec(),
                });
            }
            dst.value = p.value.clone();
        }
        Ok(())
    }

    /// Sum of squares of all values, for diagnostics.
    pub fn value_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.value.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Per-group L2 norms of the values, for diagnostics.
    pub fn group_norms(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            *out.entry(p.group.clone()).or_insert(0.0) += p.value.data().iter().map(|v| v * v).sum::<f64>();
        }
        for v in out.values_mut() {
            *v = v.sqrt();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_unknown_group_is_rejected() {
        let mut s = ParameterStore::new();
        s.insert_zeros("encoder", "encoder.b", &[3]).unwrap();
        assert_eq!(s.freeze("decoder"), Err(ParamError::UnknownGroup("decoder".into())));
        s.freeze("encoder").unwrap();
        assert_eq!(s.trainable_scalar_count(), 0);
        assert_eq!(s.scalar_count(), 3);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert_zeros("g", "x", &[1]).unwrap();
        assert!(matches!(s.insert_zeros("g", "x", &[1]), Err(ParamError::Duplicate(_))));
    }
}
