//! Parameter registry.
//!
//! Networks refer to their weights by string id. Two networks that hold the
//! same id share a single storage slot, which is how the convolutional trunk
//! is tied across input lengths.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Non-gradient state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub value: Tensor,
    pub kind: ParamKind,
    /// Frozen entries enter graphs as constants and never receive updates.
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `id` unless it already exists. An existing entry must have
    /// the same shape and kind as the would-be initial value; `init` is only
    /// called for new entries.
    pub fn register(
        &mut self,
        id: &str,
        kind: ParamKind,
        shape: &[usize],
        init: impl FnOnce() -> Tensor,
    ) -> Result<()> {
        if let Some(existing) = self.entries.get(id) {
            if existing.value.shape() != shape || existing.kind != kind {
                return Err(Error::invalid(format!(
                    "parameter {id} already registered as {:?} {:?}, requested {kind:?} {shape:?}",
                    existing.kind,
                    existing.value.shape()
                )));
            }
            return Ok(());
        }
        let value = init();
        debug_assert_eq!(value.shape(), shape);
        self.entries.insert(
            id.to_string(),
            ParamEntry {
                value,
                kind,
                frozen: false,
            },
        );
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn entry(&self, id: &str) -> Result<&ParamEntry> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {id}")))
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        Ok(&self.entry(id)?.value)
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(id)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {id}")))
    }

    /// Replaces the value of `id`, keeping its shape.
    pub fn set(&mut self, id: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(id)?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn is_frozen(&self, id: &str) -> Result<bool> {
        Ok(self.entry(id)?.frozen)
    }

    pub fn set_frozen(&mut self, id: &str, frozen: bool) -> Result<()> {
        self.entries
            .get_mut(id)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {id}")))?
            .frozen = frozen;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn insert_entry(&mut self, id: String, entry: ParamEntry) {
        self.entries.insert(id, entry);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_is_idempotent_and_shape_checked() {
        let mut store = ParamStore::new();
        store
            .register("w", ParamKind::Trainable, &[2], || {
                Tensor::from_vec(vec![1.0, 2.0])
            })
            .unwrap();
        // second registration keeps the original storage
        store
            .register("w", ParamKind::Trainable, &[2], || {
                Tensor::from_vec(vec![9.0, 9.0])
            })
            .unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.0, 2.0]);
        assert!(store
            .register("w", ParamKind::Trainable, &[3], || Tensor::zeros(vec![3]))
            .is_err());
        assert!(store.set("w", Tensor::zeros(vec![3])).is_err());
    }
}
