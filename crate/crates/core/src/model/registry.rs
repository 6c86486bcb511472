use std::collections::{BTreeMap, HashMap};

use super::tag::{ComponentTag, Group};
use super::ModelError;
use crate::tensor::{Gradients, Tensor, Var};

/// Name, shape and tag of a parameter, without its values. The model
/// builder materializes these; accounting walks them directly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub tag: ComponentTag,
}

/// Anything that can be located in the component taxonomy and counted.
pub trait TaggedParam {
    fn name(&self) -> &str;
    fn tag(&self) -> &ComponentTag;
    fn shape(&self) -> &[usize];
    fn numel(&self) -> usize {
        self.shape().iter().product()
    }
}

impl TaggedParam for ParamSpec {
    fn name(&self) -> &str {
        &self.name
    }
    fn tag(&self) -> &ComponentTag {
        &self.tag
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
    tag: ComponentTag,
}

impl Parameter {
    pub fn new(
        name: impl Into<String>,
        tensor: Tensor,
        tag: ComponentTag,
        trainable: bool,
    ) -> Self {
        Self {
            name: name.into(),
            tensor: tensor.with_requires_grad(trainable),
            tag,
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.tensor.grad()
    }

    pub fn data_and_grad_mut(&mut self) -> (&mut [f64], Option<&[f64]>) {
        self.tensor.data_and_grad_mut()
    }

    /// Mirrors `tensor.requires_grad()`; the two cannot diverge.
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.tensor.set_requires_grad(trainable);
    }
}

impl TaggedParam for Parameter {
    fn name(&self) -> &str {
        &self.name
    }
    fn tag(&self) -> &ComponentTag {
        &self.tag
    }
    fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }
}

/// Owns every parameter of a model, each under a unique dotted name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterRegistry {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Parameter) -> Result<usize, ModelError> {
        if self.by_name.contains_key(&p.name) {
            return Err(ModelError::DuplicateParameter(p.name));
        }
        let idx = self.params.len();
        self.by_name.insert(p.name.clone(), idx);
        self.params.push(p);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn as_slice(&self) -> &[Parameter] {
        &self.params
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, idx: usize) -> Option<&Parameter> {
        self.params.get(idx)
    }

    pub fn get_mut(&mut self, idx: usize) -> Option<&mut Parameter> {
        self.params.get_mut(idx)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn total(&self) -> usize {
        self.params.iter().map(TaggedParam::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(TaggedParam::numel)
            .sum()
    }

    pub fn count_by_group(&self) -> BTreeMap<Group, usize> {
        count_by_group(&self.params)
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Moves the gradients of bound parameters out of `grads` into the
    /// parameter tensors. Frozen parameters have no buffer to receive them.
    pub fn store_grads(
        &mut self,
        bindings: &[Option<Var>],
        grads: &mut Gradients,
    ) -> Result<(), ModelError> {
        for (p, var) in self.params.iter_mut().zip(bindings) {
            if let Some(g) = var.and_then(|v| grads.take(v)) {
                p.tensor.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    /// Copies out every parameter's values.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.data().to_vec()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        for (p, values) in self.params.iter_mut().zip(snapshot) {
            p.data_mut().copy_from_slice(values);
        }
    }
}

impl<'a> IntoIterator for &'a ParameterRegistry {
    type Item = &'a Parameter;
    type IntoIter = std::slice::Iter<'a, Parameter>;
    fn into_iter(self) -> Self::IntoIter {
        self.params.iter()
    }
}

/// Parameter counts per group, with every group present.
pub fn count_by_group<P: TaggedParam>(params: &[P]) -> BTreeMap<Group, usize> {
    let mut counts: BTreeMap<Group, usize> = Group::ALL.iter().map(|&g| (g, 0)).collect();
    for p in params {
        *counts.entry(p.tag().group).or_default() += p.numel();
    }
    counts
}
