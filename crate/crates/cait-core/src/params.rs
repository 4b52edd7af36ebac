//! Named parameter storage shared by model assembly, the optimizer, and
//! checkpointing.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Flat list of named parameters; order is creation order and is the
/// canonical serialization order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total element count of trainable parameters.
    pub fn trainable_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Insert every parameter as a tape leaf. Trainable parameters require
    /// gradients; frozen ones participate in the forward pass only.
    pub fn bind(&self, tape: &mut Tape) -> Result<Binding> {
        let mut ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let mut t = p.value.clone();
            t.requires_grad = p.trainable;
            ids.push(tape.leaf(t)?);
        }
        Ok(Binding { ids })
    }

    /// Copy the tape's leaf gradients into each trainable parameter's
    /// `grad` buffer (overwriting previous contents).
    pub fn collect_grads(&mut self, tape: &Tape, binding: &Binding) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let got = tape.grad(binding.ids[i]);
            p.value.alloc_grad();
            let buf = p.value.grad.as_mut().expect("grad allocated");
            match got {
                Some(g) => buf.copy_from_slice(g),
                None => buf.iter_mut().for_each(|v| *v = 0.0),
            }
        }
    }
}

/// Tape ids of one [`ParamStore::bind`] call.
#[derive(Debug, Clone)]
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn bind_and_collect_round_trip() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![2.0, 3.0]), true);
        let frozen = store.add("frozen", Tensor::vector(vec![5.0]), false);

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let prod = tape.scale_scalar(bind.id(w), bind.id(frozen)).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        store.collect_grads(&tape, &bind);

        assert_eq!(store.get(w).value.grad.as_deref().unwrap(), &[5.0, 5.0]);
        assert!(store.get(frozen).value.grad.is_none());
        assert_eq!(store.trainable_elements(), 2);
    }
}
