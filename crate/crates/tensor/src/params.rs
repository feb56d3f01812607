use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::graph::Gradients;
use crate::tensor::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Index of an entry inside one [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Identifies a parameter across stores; graphs record this for param leaves.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub(crate) store: u64,
    pub(crate) index: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Trainable, receives gradients and optimizer updates.
    Param,
    /// Persistent state that is checkpointed but never trained (running stats).
    Buffer,
}

#[derive(Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Option<Tensor>,
    kind: EntryKind,
}

/// Named registry of parameters and buffers in registration order.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    /// The clone gets a fresh store identity; gradients recorded against the
    /// original never apply to it.
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: e.value.clone(), grad: e.grad.clone(), kind: e.kind })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { id: NEXT_STORE.fetch_add(1, Ordering::Relaxed), entries: Vec::new(), by_name: HashMap::new() }
    }

    pub(crate) fn store_id(&self) -> u64 {
        self.id
    }

    pub(crate) fn key(&self, id: ParamId) -> ParamKey {
        ParamKey { store: self.id, index: id.0 }
    }

    fn insert(&mut self, name: &str, value: Tensor, kind: EntryKind) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let idx = self.entries.len();
        self.entries.push(Entry { name: name.to_string(), value, grad: None, kind });
        self.by_name.insert(name.to_string(), idx);
        Ok(ParamId(idx))
    }

    pub fn add_param(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, EntryKind::Param)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, EntryKind::Buffer)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        self.id_of(name).map(|id| self.get(id)).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> EntryKind {
        self.entries[id.0].kind
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.entries[id.0].grad.as_ref()
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, Option<&mut Tensor>) {
        let e = &mut self.entries[id.0];
        (&mut e.value, e.grad.as_mut())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All entry ids (params and buffers) in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Trainable parameter ids in registration order.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == EntryKind::Param)
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.param_ids().map(|id| self.get(id).numel()).sum()
    }

    /// Number of trainable scalars among parameters whose name satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.param_ids().filter(|&id| pred(self.name(id))).map(|id| self.get(id).numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn has_any_grad(&self) -> bool {
        self.entries.iter().any(|e| e.grad.is_some())
    }

    /// Adds every gradient in `grads` that was recorded against this store.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (key, g) in grads.param_grads() {
            if key.store != self.id {
                continue;
            }
            let e = &mut self.entries[key.index];
            if e.kind != EntryKind::Param {
                continue;
            }
            match &mut e.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => e.grad = Some(g.clone()),
            }
        }
    }

    /// `(name, tensor)` pairs for every entry in registration order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> + '_ {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Overwrites values by name. Every entry of this store must be present
    /// with a matching shape; extra names in `named` are ignored.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for e in &mut self.entries {
            let t = lookup.get(e.name.as_str()).ok_or_else(|| TensorError::UnknownParam(e.name.clone()))?;
            if t.shape() != e.value.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = (*t).clone();
            e.grad = None;
        }
        Ok(())
    }
}
