//! Named parameter storage.
//!
//! All learnable tensors (and the non-trainable running statistics that
//! travel with them) live in one [`ParamStore`], keyed by a dotted path
//! such as `backbone.stage0.block1.attn.qkv.weight`. Registration order
//! is the canonical order: the optimizer walks entries in that order,
//! checkpoints store them in that order, and gradient accumulation sums
//! per-sample contributions in that order, which keeps every run
//! bit-reproducible.
//!
//! Initialization draws from an RNG stream derived from the parameter's
//! name, so adding or removing one layer never reshuffles the initial
//! values of another.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{checkpoint, Element, Tensor};

/// One named tensor: weights, bias, positional table, or running stat.
#[derive(Debug, Clone)]
pub struct Parameter<E> {
    pub name: String,
    pub value: Tensor<E>,
    /// Accumulated gradient for the current step; `None` until the first
    /// backward pass touches the parameter.
    pub grad: Option<Tensor<E>>,
    /// Non-trainable entries (batchnorm running statistics) are saved and
    /// loaded but never stepped by the optimizer.
    pub trainable: bool,
}

#[derive(Debug, Default)]
pub struct ParamStore<E> {
    entries: Vec<Parameter<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add(&mut self, name: &str, value: Tensor<E>, trainable: bool) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!(
                "parameter {name:?} registered twice"
            )));
        }
        let idx = self.entries.len();
        self.index.insert(name.to_string(), idx);
        self.entries.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            trainable,
        });
        Ok(idx)
    }

    /// Trainable tensor initialized from a truncated normal (|z| <= 2
    /// resampled), stream derived from the parameter name.
    pub fn add_trunc_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        root: &Rng,
    ) -> Result<usize> {
        let mut rng = root.derive(name);
        self.add(name, Tensor::trunc_normal(shape, std, &mut rng), true)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<usize> {
        self.add(name, Tensor::zeros(shape), trainable)
    }

    /// Non-trainable tensor filled with a constant (batchnorm running
    /// variance starts at 1).
    pub fn add_full(&mut self, name: &str, shape: &[usize], v: f64, trainable: bool) -> Result<usize> {
        self.add(name, Tensor::full(shape, E::of(v)), trainable)
    }

    pub fn lookup(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| {
            Error::Contract(format!("unknown parameter {name:?}"))
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entry(&self, idx: usize) -> &Parameter<E> {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut Parameter<E> {
        &mut self.entries[idx]
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<E>> {
        Ok(&self.entries[self.lookup(name)?].value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let idx = self.lookup(name)?;
        self.entries[idx].value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.entries.iter()
    }

    /// Adds per-parameter gradient contributions (from one sample's
    /// backward pass) into the store, in the order given.
    pub fn accumulate(&mut self, contributions: &[(usize, Tensor<E>)]) -> Result<()> {
        for (idx, g) in contributions {
            let entry = &mut self.entries[*idx];
            if g.shape() != entry.value.shape() {
                return Err(Error::DimMismatch {
                    op: "accumulate",
                    lhs: entry.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            match &mut entry.grad {
                Some(acc) => acc.add_assign(g),
                None => entry.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn total_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Writes every entry (plus `extra` metadata) as a checkpoint file.
    pub fn save(
        &self,
        path: &Path,
        extra: &serde_json::Map<String, serde_json::Value>,
    ) -> Result<()> {
        let tensors: Vec<(String, &Tensor<E>, bool)> = self
            .entries
            .iter()
            .map(|e| (e.name.clone(), &e.value, e.trainable))
            .collect();
        checkpoint::save(path, &tensors, extra)
    }

    /// Replaces the values of existing entries from a checkpoint. Every
    /// checkpointed tensor must match a registered parameter in name and
    /// shape, and every registered parameter must be present.
    pub fn load(&mut self, ckpt: &checkpoint::Checkpoint<E>) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, tensor, _) in &ckpt.tensors {
            let idx = self.index.get(name).copied().ok_or_else(|| {
                Error::Checkpoint(format!(
                    "checkpoint tensor {name:?} does not exist in the model"
                ))
            })?;
            if tensor.shape() != self.entries[idx].value.shape() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint tensor {name:?} has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    self.entries[idx].value.shape()
                )));
            }
            self.entries[idx].value = tensor.clone();
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing parameter {:?}",
                self.entries[missing].name
            )));
        }
        Ok(())
    }
}
