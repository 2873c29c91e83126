//! Named parameter storage shared by every learned component.

use std::ops::Index;

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered collection of learned tensors. Order is part of the model
/// definition: checkpoints and optimizer state follow it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value });
        ParamId(self.entries.len() - 1)
    }

    /// Glorot-uniform initialised matrix `[fan_in, fan_out]`.
    pub fn add_glorot(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> ParamId {
        self.add(name, glorot(&[fan_in, fan_out], fan_in, fan_out, rng))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of learned scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(
            self.entries
                .iter()
                .enumerate()
                .map(|(i, e)| g.param(ParamId(i), &e.value))
                .collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}

/// Graph leaves for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

pub fn glorot<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(shape, limit, rng)
}

pub fn uniform<T: Scalar>(shape: &[usize], limit: f64, rng: &mut Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy((2.0 * rng.uniform() - 1.0) * limit))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
