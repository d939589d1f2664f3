//! Named parameter matrices with parallel gradient buffers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Parameter store: every parameter carries a same-shaped gradient buffer.
///
/// Keys are ordered (`BTreeMap`) so optimizer traversal and serialization
/// are deterministic.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
    #[serde(skip)]
    grads: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) {
        self.grads
            .insert(name.to_string(), Matrix::zeros(value.rows(), value.cols()));
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Result<&Matrix> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown gradient buffer `{name}`")))
    }

    /// Adds `delta` into the gradient buffer of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Matrix) -> Result<()> {
        let g = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown gradient buffer `{name}`")))?;
        if !g.same_shape(delta) {
            return Err(Error::Dimension(format!(
                "gradient for `{name}`: buffer {}x{}, delta {}x{}",
                g.rows(),
                g.cols(),
                delta.rows(),
                delta.cols()
            )));
        }
        for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
            *a += b;
        }
        Ok(())
    }

    /// Sets every gradient entry to exactly 0.
    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|m| m.data().len()).sum()
    }

    /// Rebuilds gradient buffers after deserialization (serde skips them).
    pub fn ensure_grad_buffers(&mut self) {
        for (name, value) in &self.params {
            self.grads
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(value.rows(), value.cols()));
        }
    }
}
