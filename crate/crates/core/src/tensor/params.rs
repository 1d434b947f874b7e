use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    grad: Vec<T>,
}

/// Named trainable tensors with gradient accumulators.
///
/// Registration order is the canonical order used by checkpoints and
/// optimizers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        let grad = vec![T::zero(); value.numel()];
        self.entries.push(Entry { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn expect_id(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].grad
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor<T>, &[T]) {
        let e = &mut self.entries[id.0];
        (&mut e.value, &e.grad)
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        for (acc, &v) in self.entries[id.0].grad.iter_mut().zip(g) {
            *acc = *acc + v;
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Content hash over names, shapes and raw values.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for e in &self.entries {
            hasher.update(e.name.as_bytes());
            for &d in e.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in e.value.data() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(e.name.clone(), e.value.cast())
                .expect("names are unique in the source store");
        }
        out
    }
}
