use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Gradients, Graph};
use super::{Float, Tensor};
use crate::error::{contract_err, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Gaussian with standard deviation `sqrt(2 / fan_in)`.
    He {
        fan_in: usize,
    },
    Normal {
        std: f64,
    },
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    tensor: Tensor<T>,
    frozen: bool,
}

/// Named, ordered collection of trainable tensors.
///
/// Gradient buffers are attached by [`ParamStore::accumulate`] and dropped by
/// [`ParamStore::zero_grads`]; an optimizer step on a trainable parameter
/// without a buffer is a contract violation.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    entries: Vec<Entry<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Constant(c) => vec![T::lit(c); numel],
            Init::He { fan_in } => sample_normal((2.0 / fan_in.max(1) as f64).sqrt(), numel, rng),
            Init::Normal { std } => sample_normal(std, numel, rng),
        };
        self.insert(name, Tensor::new(shape, data).expect("shape from caller"))
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            tensor,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        let e = &mut self.entries[id.0];
        e.frozen = frozen;
        if frozen {
            e.tensor.grad = None;
        }
    }

    /// Freezes (or thaws) every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let ids: Vec<ParamId> = self
            .ids()
            .filter(|&id| self.name(id).starts_with(prefix))
            .collect();
        for &id in &ids {
            self.set_frozen(id, frozen);
        }
        ids.len()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn numel_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.frozen)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Adds the gradients of every parameter leaf of `graph` into the
    /// parameters' gradient buffers. Parameters not reached by the loss
    /// still get a (zero) buffer.
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for &(var, id) in graph.param_links() {
            let e = &mut self.entries[id.0];
            if e.frozen {
                continue;
            }
            let buf = e
                .tensor
                .grad
                .get_or_insert_with(|| vec![T::zero(); e.tensor.data.len()]);
            if let Some(g) = grads.get(var) {
                buf.iter_mut().zip(g).for_each(|(b, &v)| *b += v);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    /// Multiplies every gradient buffer by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        let f = T::lit(factor);
        for e in &mut self.entries {
            if let Some(g) = e.tensor.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= f);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            e.tensor
                .validate()
                .map_err(|err| contract_err!("parameter {}: {err}", e.name))?;
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    frozen: e.frozen,
                })
                .collect(),
        }
    }

    /// Copies values (not frozen flags) from `other`, matched by name.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        for e in &mut self.entries {
            let Some(id) = other.find(&e.name) else {
                return Err(contract_err!("parameter {} missing from source", e.name));
            };
            let src = other.tensor(id);
            if src.shape() != e.tensor.shape() {
                return Err(contract_err!(
                    "parameter {}: shape {:?} vs {:?}",
                    e.name,
                    src.shape(),
                    e.tensor.shape()
                ));
            }
            e.tensor.data.copy_from_slice(src.data());
        }
        Ok(())
    }
}

fn sample_normal<T: Float, R: Rng + ?Sized>(std: f64, n: usize, rng: &mut R) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::lit(dist.sample(rng))).collect()
}
