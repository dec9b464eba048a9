use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{JigsawError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters plus AdamW moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    pub(crate) m: Vec<Tensor>,
    pub(crate) v: Vec<Tensor>,
    pub(crate) step: u64,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(JigsawError::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        let zeros = value.map(|_| 0.0);
        self.by_name.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.m.push(zeros.clone());
        self.v.push(zeros);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.values.iter()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor {
        &self.m[id.0]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor {
        &self.v[id.0]
    }

    /// Overwrites optimizer state; used when restoring a checkpoint.
    pub(crate) fn set_optimizer_state(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        for ((p, a), b) in self.values.iter().zip(&m).zip(&v) {
            p.require_same_shape("optimizer state", a)?;
            p.require_same_shape("optimizer state", b)?;
        }
        if m.len() != self.len() || v.len() != self.len() {
            return Err(JigsawError::shape("optimizer state", &[self.len()], &[m.len(), v.len()]));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
