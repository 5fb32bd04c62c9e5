//! Named parameter registry shared by a model and its optimizers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Arch,
}

#[derive(Clone, Debug)]
pub struct Param<E: Scalar> {
    pub value: Tensor<E>,
    pub trainable: bool,
    pub kind: ParamKind,
}

/// Parameters keyed by unique name path, iterated in lexicographic order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E: Scalar> {
    entries: BTreeMap<String, Param<E>>,
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor<E>,
        trainable: bool,
        kind: ParamKind,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(
                "param_store",
                format!("duplicate parameter name {name:?}"),
            ));
        }
        self.entries.insert(
            name,
            Param {
                value: value.detach(),
                trainable,
                kind,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<E>> {
        self.entries.get(name)
    }

    /// Current value, untracked. Missing names are an error.
    pub fn value(&self, name: &str) -> Result<&Tensor<E>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Current value registered as a named leaf on `tape`.
    pub fn tracked(&self, tape: &Tape<E>, name: &str) -> Result<Tensor<E>> {
        Ok(tape.leaf(name, self.value(name)?))
    }

    /// Replace a value; the shape must not change.
    pub fn set_value(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_store",
                format!(
                    "{name}: cannot change shape {:?} to {:?}",
                    entry.value.shape(),
                    value.shape()
                ),
            ));
        }
        entry.value = value.detach();
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<E>)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|n| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Names of trainable parameters of the given kind, in lexicographic order.
    pub fn names_of_kind(&self, kind: ParamKind) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable && p.kind == kind)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Total element count across all parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Total element count across trainable parameters.
    pub fn trainable_numel(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Gradients<E: Scalar> {
    map: BTreeMap<String, Tensor<E>>,
}

impl<E: Scalar> Default for Gradients<E> {
    fn default() -> Self {
        Gradients {
            map: BTreeMap::new(),
        }
    }
}

impl<E: Scalar> Gradients<E> {
    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<E>) {
        self.map.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.map.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
