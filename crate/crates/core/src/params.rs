//! Named parameter storage.
//!
//! Every learnable tensor and running statistic of a model lives in one
//! [`ParamStore`] under a unique, stable name. Layers hold [`ParamId`]s into
//! the store and register the tensors on a [`crate::autodiff::Graph`] for
//! each forward pass.

use std::collections::HashMap;

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

/// Role of a stored tensor. Determines trainability and weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Weights, learned graphs and gates. Trainable, decayed.
    Weight,
    /// Additive biases. Trainable, not decayed.
    Bias,
    /// Batch-norm scale and shift. Trainable, not decayed.
    Norm,
    /// Running statistics. Never touched by the optimizer.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }

    pub fn decayed(self) -> bool {
        matches!(self, ParamKind::Weight)
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::Norm => 2,
            ParamKind::Buffer => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::Norm,
            3 => ParamKind::Buffer,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    /// Gradient propagation blocked (the early-training global graph).
    pub frozen: bool,
    pub grad: Option<Tensor>,
}

impl ParamEntry {
    /// Whether a forward pass should track gradients for this entry.
    pub fn requires_grad(&self) -> bool {
        self.kind.trainable() && !self.frozen
    }
}

/// Pending exponential-moving-average update produced by a training-mode
/// batch norm.
#[derive(Clone, Debug)]
pub struct RunningUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, kind, frozen: false, grad: None });
        ParamId(id)
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

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Additive accumulation into the stored gradient.
    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        let e = &mut self.entries[id.0];
        match &mut e.grad {
            Some(existing) => existing.add_assign(g),
            None => e.grad = Some(g.clone()),
        }
    }

    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate]) {
        for u in updates {
            let m = u.momentum;
            for (r, b) in self.entries[u.mean.0].value.data_mut().iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.entries[u.var.0].value.data_mut().iter_mut().zip(&u.batch_var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }

    /// Total number of scalars across every trainable entry.
    pub fn count_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.kind.trainable()).map(|e| e.value.numel()).sum()
    }
}
