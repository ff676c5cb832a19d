use std::collections::BTreeMap;

use super::checkpoint::{Container, Precision};
use super::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Append every parameter to `out` under `prefix`.
    pub fn write_to(&self, out: &mut Container, prefix: &str, precision: Precision) -> Result<()> {
        for (name, t) in &self.params {
            out.push_tensor(format!("{prefix}{name}"), t, precision)?;
        }
        Ok(())
    }

    /// Collect every record whose name starts with `prefix`.
    pub fn read_from(container: &Container, prefix: &str) -> Result<Self> {
        let mut store = ParameterStore::new();
        for rec in container.records() {
            if let Some(name) = rec.name.strip_prefix(prefix) {
                store.insert(name, container.tensor(&rec.name)?)?;
            }
        }
        Ok(store)
    }
}
