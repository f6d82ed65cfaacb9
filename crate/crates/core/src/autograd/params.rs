use indexmap::IndexMap;

use super::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Whether an entry is updated by the optimizer or only carried along
/// (batch-norm running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// Named tensors of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    entries: IndexMap<String, (ParamKind, Tensor<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Registers a new entry. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(invalid(format!("parameter {name:?} registered twice")));
        }
        self.entries.insert(name, (kind, value));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.1)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|e| e.0)
    }

    /// Like [`ParamStore::get`] but a missing entry is an error.
    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::InvalidState(format!("missing parameter {name:?}")))
    }

    /// Replaces the value of an existing entry; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidState(format!("missing parameter {name:?}")))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                found: value.shape().dims().to_vec(),
                expected: slot.1.shape().dims().to_vec(),
            });
        }
        slot.1 = value;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.entries.shift_remove(name).map(|e| e.1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<T>)> {
        self.entries.iter().map(|(n, (k, t))| (n.as_str(), *k, t))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter()
            .filter(|e| e.1 == ParamKind::Trainable)
            .map(|(n, _, t)| (n, t))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// The tape leaf for trainable parameter `name`.
    pub fn leaf(&self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(v) = tape.param_var(name) {
            return Ok(v);
        }
        Ok(tape.param(name, self.require(name)?))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, (k, t))| (n.clone(), (*k, t.cast())))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn insert_get_set() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", ParamKind::Trainable, Tensor::zeros(Shape::vector(1, 3))).unwrap();
        s.insert("b", ParamKind::Buffer, Tensor::zeros(Shape::vector(1, 2))).unwrap();
        assert!(s.insert("a", ParamKind::Buffer, Tensor::zeros(Shape::vector(1, 1))).is_err());
        assert_eq!(s.num_trainable(), 3);
        assert!(matches!(
            s.set("a", Tensor::zeros(Shape::vector(1, 4))),
            Err(Error::ShapeMismatch { .. })
        ));
        s.set("a", Tensor::full(Shape::vector(1, 3), 2.0)).unwrap();
        assert_eq!(s.cast::<f64>().get("a").unwrap().data(), &[2.0; 3]);
        assert!(matches!(s.require("zzz"), Err(Error::InvalidState(_))));
    }
}
