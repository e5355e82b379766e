//! Named parameter storage shared between the model and the optimizer.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Trainable parameters plus non-trainable buffers (running statistics).
///
/// Tensors are reference-counted so that parallel per-sample graphs can
/// share them without copying; the optimizer mutates through
/// `Arc::make_mut` once all graphs are dropped.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Arc<Tensor>>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.params.insert(name.to_string(), Arc::new(t));
    }

    pub fn insert_buffer(&mut self, name: &str, t: Tensor) {
        self.buffers.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Data(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Data(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Data(format!("missing buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Data(format!("missing buffer {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Tensor>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &String> {
        self.buffers.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Round every parameter and buffer through f32.
    pub fn round_f32(&mut self) {
        for t in self.params.values_mut() {
            Arc::make_mut(t).round_f32();
        }
        for t in self.buffers.values_mut() {
            t.round_f32();
        }
    }
}
