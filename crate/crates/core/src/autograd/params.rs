//! Named parameter storage shared between the trainer, the optimizer and
//! checkpoints.

use std::collections::HashMap;

use super::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry<S> {
    name: String,
    value: Tensor<S>,
    grad: Vec<S>,
    trainable: bool,
    /// Buffers (BN running statistics) are saved but never optimized.
    buffer: bool,
}

/// Ordered collection of parameters and buffers addressed by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar = f32> {
    entries: Vec<Entry<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<S>, buffer: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            grad: vec![S::zero(); value.len()],
            value,
            trainable: !buffer,
            buffer,
        });
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    /// Registers a trainable parameter. Panics on duplicate names.
    pub fn add(&mut self, name: &str, value: Tensor<S>) -> ParamId {
        self.insert(name, value, false)
    }

    /// Registers a non-trainable buffer. Panics on duplicate names.
    pub fn add_buffer(&mut self, name: &str, value: Tensor<S>) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[S] {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.entries[id.0].grad
    }

    pub fn is_buffer(&self, id: ParamId) -> bool {
        self.entries[id.0].buffer
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Freezes or unfreezes a parameter; buffers stay untrainable.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let e = &mut self.entries[id.0];
        e.trainable = trainable && !e.buffer;
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Places a parameter on `tape` as a leaf that tracks gradients when
    /// the parameter is trainable.
    pub fn leaf(&self, tape: &mut Tape<S>, id: ParamId) -> Var {
        let e = &self.entries[id.0];
        tape.leaf(e.value.clone(), e.trainable)
    }

    /// Adds the gradient accumulated on `tape` for `var` into `id`.
    pub fn accumulate_grad(&mut self, tape: &Tape<S>, id: ParamId, var: Var) {
        if let Some(g) = tape.grad(var) {
            let e = &mut self.entries[id.0];
            for (a, b) in e.grad.iter_mut().zip(g) {
                *a = *a + *b;
            }
        }
    }

    /// Count of scalar values in trainable and frozen parameters, excluding buffers.
    pub fn parameter_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.buffer).map(|e| e.value.len()).sum()
    }
}
