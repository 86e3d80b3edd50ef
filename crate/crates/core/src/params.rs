//! Named parameter storage with task ownership.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    Depth,
    Seg,
}

impl TaskId {
    pub const ALL: [TaskId; 2] = [TaskId::Depth, TaskId::Seg];

    pub fn other(self) -> TaskId {
        match self {
            TaskId::Depth => TaskId::Seg,
            TaskId::Seg => TaskId::Depth,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            TaskId::Depth => "depth",
            TaskId::Seg => "seg",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which loss a parameter is trained by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Owner {
    Shared,
    Task(TaskId),
}

impl Owner {
    pub fn code(self) -> u8 {
        match self {
            Owner::Shared => 0,
            Owner::Task(TaskId::Depth) => 1,
            Owner::Task(TaskId::Seg) => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Owner> {
        match code {
            0 => Some(Owner::Shared),
            1 => Some(Owner::Task(TaskId::Depth)),
            2 => Some(Owner::Task(TaskId::Seg)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub owner: Owner,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new entry. Panics on duplicate names, which would be a
    /// model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, owner: Owner, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            owner,
            kind,
            value,
        });
        id
    }

    pub fn trainable(&mut self, name: impl Into<String>, owner: Owner, value: Tensor) -> ParamId {
        self.add(name, owner, ParamKind::Trainable, value)
    }

    pub fn buffer(&mut self, name: impl Into<String>, owner: Owner, value: Tensor) -> ParamId {
        self.add(name, owner, ParamKind::Buffer, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Mutable access to two distinct entries at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor, &mut Tensor) {
        assert_ne!(a, b, "pair_mut needs distinct ids");
        if a.0 < b.0 {
            let (lo, hi) = self.entries.split_at_mut(b.0);
            (&mut lo[a.0].value, &mut hi[0].value)
        } else {
            let (lo, hi) = self.entries.split_at_mut(a.0);
            (&mut hi[0].value, &mut lo[b.0].value)
        }
    }

    pub fn owner(&self, id: ParamId) -> Owner {
        self.entries[id.0].owner
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> + '_ {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(id, _)| id)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Overwrites values from another store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (id, e) in other.entries() {
            let Some(mine) = self.find(&e.name) else {
                return Err(Error::Checkpoint(format!("unknown parameter {}", e.name)));
            };
            if self.value(mine).shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    e.name,
                    self.value(mine).shape(),
                    other.value(id).shape()
                )));
            }
            self.entries[mine.0].value = e.value.clone();
        }
        Ok(())
    }
}

/// Fan-in scaled uniform initialization, bound `1/sqrt(fan_in)`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn owner_codes_round_trip() {
        for o in [Owner::Shared, Owner::Task(TaskId::Depth), Owner::Task(TaskId::Seg)] {
            assert_eq!(Owner::from_code(o.code()), Some(o));
        }
        assert_eq!(Owner::from_code(9), None);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::new();
        s.trainable("a", Owner::Shared, Tensor::scalar(1.0));
        s.trainable("a", Owner::Shared, Tensor::scalar(1.0));
    }
}
