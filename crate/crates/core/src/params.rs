//! Named parameter tensors with frozen/trainable flags.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Parameter>,
}

/// Bit-exact copy of every parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot(BTreeMap<String, Tensor>);

impl Snapshot {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        self.entries.insert(name, Parameter { value, frozen });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ParameterShape {
                name: name.to_string(),
                expected: p.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.frozen = frozen)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot(
            self.entries
                .iter()
                .map(|(k, p)| (k.clone(), p.value.clone()))
                .collect(),
        )
    }

    /// Names whose values are not bit-identical to `snap` (or are missing
    /// from it).
    pub fn changed_since(&self, snap: &Snapshot) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(k, p)| snap.get(k).is_none_or(|s| !s.bit_eq(&p.value)))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// `(frozen, trainable)` scalar counts.
    pub fn counts(&self) -> (usize, usize) {
        self.entries.values().fold((0, 0), |(f, t), p| {
            if p.frozen {
                (f + p.value.numel(), t)
            } else {
                (f, t + p.value.numel())
            }
        })
    }
}
