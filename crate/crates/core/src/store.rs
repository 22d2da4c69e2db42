//! Ordered collection of named parameter tensors.

use std::collections::HashMap;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor<f32>,
    pub prunable: bool,
    pub output_layer: bool,
}

/// Parameters in a fixed enumeration order, addressable by index or name.
#[derive(Clone, Debug, Default)]
pub struct NamedTensorStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl PartialEq for NamedTensorStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl NamedTensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: ParamEntry) -> Result<usize> {
        if self.index.contains_key(&entry.name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{}`",
                entry.name
            )));
        }
        let idx = self.entries.len();
        self.index.insert(entry.name.clone(), idx);
        self.entries.push(entry);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<f32> {
        &mut self.entries[idx].tensor
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry> {
        self.position(name).map(|i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn prunable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.prunable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Checks that `other` has the same names, shapes and roles in the same order.
    pub fn check_compatible(&self, other: &NamedTensorStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Alignment(format!(
                "stores hold {} and {} tensors",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name
                || a.tensor.shape() != b.tensor.shape()
                || a.prunable != b.prunable
                || a.output_layer != b.output_layer
            {
                return Err(Error::Alignment(format!(
                    "tensor `{}` {:?} does not match `{}` {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}
