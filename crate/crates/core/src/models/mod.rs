//! Encoder and autoregressor models plus the shared named-parameter store.

mod autoregressor;
mod encoder;
mod head;

pub use autoregressor::{Autoregressor, AutoregressorConfig};
pub use encoder::{Encoder, EncoderConfig, PadMode};
pub use head::{HeadConfig, LinearHead};

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, ValueId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepRole {
    Train,
    TargetEncoded,
    Predicted,
}

/// A stack of representation vectors living on a tape, one row per grid
/// coordinate of the matching IndexSequence.
#[derive(Debug, Clone, Copy)]
pub struct RepSequence {
    pub values: ValueId,
    pub len: usize,
    pub dim: usize,
    pub role: RepRole,
}

/// Named trainable tensors, ordered by insertion so binding is stable.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            self.index.insert(name.clone(), self.entries.len()).is_none(),
            "duplicate parameter {name}"
        );
        self.entries.push((name, tensor.with_grad()));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Record every parameter as a tracked leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t)))
            .collect();
        Bound { ids }
    }

    /// Pull gradients accumulated on `tape` back into the parameter store.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (name, t) in self.entries.iter_mut() {
            if let Some(g) = tape.grad(bound.id(name)) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    /// Restore every parameter from `source` by name (extra source entries
    /// belong to other stores and are ignored).
    pub fn load(&mut self, source: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in self.entries.iter_mut() {
            let found = source
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name}")))?;
            if found.1.shape() != t.shape() {
                return Err(Error::shape(
                    "load",
                    format!("parameter {name}: stored {:?} vs model {:?}", found.1.shape(), t.shape()),
                ));
            }
            t.data_mut().copy_from_slice(found.1.data());
            t.zero_grad();
        }
        Ok(())
    }
}

/// Tape handles for one bound parameter set.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: HashMap<String, ValueId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> ValueId {
        self.ids[name]
    }
}

/// Kaiming-style uniform init: bound sqrt(6 / fan_in).
fn kaiming(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init shape is valid")
}

/// Small-uniform init for embeddings and biases that start near zero.
fn small_uniform(shape: Vec<usize>, scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).expect("init shape is valid")
}

fn ones(shape: Vec<usize>) -> Tensor {
    Tensor::full(shape, 1.0)
}

fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape)
}

pub(crate) fn flat_indices(coords: &[(usize, usize)], grid_side: usize) -> Result<Vec<usize>> {
    coords
        .iter()
        .map(|&(r, c)| {
            if r >= grid_side || c >= grid_side {
                Err(Error::GridSpec(format!(
                    "coordinate ({r},{c}) outside positional table of side {grid_side}"
                )))
            } else {
                Ok(r * grid_side + c)
            }
        })
        .collect()
}
