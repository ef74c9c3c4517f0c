use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named model parameters in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamSet {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor<f32>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameter names for {} tensors",
                names.len(),
                tensors.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::Checkpoint(format!("duplicate parameter name '{dup}'")));
        }
        Ok(ParamSet { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Parameter counts grouped by the first path component of each name.
    pub fn count_by_component(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.iter() {
            let head = name.split('.').next().unwrap_or(name).to_string();
            match groups.iter_mut().find(|(g, _)| *g == head) {
                Some((_, n)) => *n += t.len(),
                None => groups.push((head, t.len())),
            }
        }
        groups
    }
}
