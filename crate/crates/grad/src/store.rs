use std::collections::HashMap;

use crate::{GradError, Result, Tensor};

/// Handle to a named tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics and other state that is saved but not trained.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct NamedTensor {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub frozen: bool,
}

/// Owns every weight and buffer of a model, addressed by hierarchical name
/// (`enc.0.conv1.weight`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<NamedTensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(GradError::DuplicateName(name));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(NamedTensor {
            name,
            kind,
            value,
            frozen: false,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &NamedTensor {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &NamedTensor)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &NamedTensor)> {
        self.iter().filter(|(_, e)| e.kind == ParamKind::Trainable)
    }

    /// Excludes parameters whose name starts with `prefix` from optimizer
    /// updates.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut count = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
                count += 1;
            }
        }
        count
    }

    /// Replaces a tensor by name, keeping its shape contract.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| GradError::UnknownName(name.to_string()))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(GradError::Shape(format!(
                "{name}: stored shape {:?}, new shape {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, t) in updates {
            self.entries[id.0].value = t;
        }
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.trainable().map(|(_, e)| e.value.len()).sum()
    }
}
