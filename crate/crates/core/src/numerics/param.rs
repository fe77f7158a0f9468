use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Which optimizer parameter group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Lca,
    Mpp,
    LanguageModel,
    Lora,
    /// Parameters used only by gradient checks and tests.
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            group,
            value,
            grad,
            trainable: true,
        }
    }
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, group: ParamGroup, value: Tensor<T>) -> Result<usize> {
        value.ensure_finite(name)?;
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        self.params.push(Parameter::new(name, group, value));
        self.index.insert(name.to_string(), self.params.len() - 1);
        Ok(self.params.len() - 1)
    }

    pub fn insert_normal(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<usize> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
        self.insert(name, group, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, group: ParamGroup, shape: &[usize]) -> Result<usize> {
        self.insert(name, group, Tensor::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        Ok(&self.params[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        let id = self.id(name)?;
        Ok(&mut self.params[id])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    /// Replace a value, keeping the shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: new value shape {:?} differs from {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn by_index(&self, id: usize) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn by_index_mut(&mut self, id: usize) -> &mut Parameter<T> {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable_groups(&mut self, groups: &[ParamGroup]) {
        for p in &mut self.params {
            p.trainable = groups.contains(&p.group);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Add `grad` into parameter `id`'s gradient. Frozen parameters ignore it,
    /// so their reported gradient stays exactly zero.
    pub fn accumulate_grad(&mut self, id: usize, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id];
        if p.trainable {
            p.grad.add_assign(grad)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Values of every parameter, for bitwise before/after comparisons.
    pub fn snapshot(&self) -> Vec<(String, Tensor<T>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
