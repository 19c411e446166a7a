//! Named parameter storage with group tags for differential learning rates.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which learning-rate group a parameter belongs to.
///
/// `Stem` covers the encoder up to the split block, `Feature` the blocks
/// after it, `Ctn` the concept head's transformer blocks, `Heads` its
/// classification MLP, and `Decoder` everything in the caption decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Stem,
    Feature,
    Ctn,
    Heads,
    Decoder,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Stem => "stem",
            ParamGroup::Feature => "feature",
            ParamGroup::Ctn => "ctn",
            ParamGroup::Heads => "heads",
            ParamGroup::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

/// Ordered collection of parameters; insertion order is the checkpoint
/// record order, so it must be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> ParamSet<T> {
        ParamSet {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        mut tensor: Tensor<T>,
    ) -> Result<()> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        tensor.requires_grad = true;
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            group,
            tensor,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    pub fn get_at(&self, index: usize) -> &Parameter<T> {
        &self.params[index]
    }

    pub fn get_at_mut(&mut self, index: usize) -> &mut Parameter<T> {
        &mut self.params[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Sets every allocated gradient buffer to zero.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Drops gradient buffers entirely, so untouched parameters are
    /// distinguishable from ones that received a zero gradient.
    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Copies values (not grads) from `src` into an existing parameter.
    pub fn copy_values(&mut self, name: &str, src: &[T]) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name:?}")))?;
        if p.tensor.numel() != src.len() {
            return Err(Error::shape(format!(
                "parameter {name:?} has {} elements, source has {}",
                p.tensor.numel(),
                src.len()
            )));
        }
        p.tensor.data_mut().copy_from_slice(src);
        Ok(())
    }
}
