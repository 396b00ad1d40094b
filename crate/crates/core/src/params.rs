//! Named parameter storage shared by the base model and the adapters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of named tensors. Order is insertion order and is
/// part of the checkpoint format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(Param { name: name.into(), value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.entries.iter().map(|p| p.value.clone()).collect()
    }

    /// Replaces every value, keeping names. Shapes must match.
    pub fn set_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Parameter(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                values.len()
            )));
        }
        for (p, v) in self.entries.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::Parameter(format!(
                    "{}: shape {:?} does not match {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v;
        }
        Ok(())
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound(self.entries.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect())
    }
}

/// Tape handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps handles that are already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

pub(crate) fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if bound > 0.0 {
        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
    } else {
        vec![0.0; n]
    };
    Tensor::new(shape.to_vec(), data).expect("shape")
}
