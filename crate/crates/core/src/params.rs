//! Named parameter collections.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// An ordered set of named tensors. Order is fixed by construction, so two
/// sets built from the same configuration are structurally identical.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn push(&mut self, name: impl ToString, value: Tensor, decay: bool) -> usize {
        self.params.push(Param {
            name: name.to_string(),
            value,
            decay,
        });
        self.params.len() - 1
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Errors unless `other` has the same names and shapes in the same order.
    pub fn check_same_structure(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Structure(format!("{} vs {} tensors", self.len(), other.len())));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Structure(format!(
                    "{}{:?} vs {}{:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        )
    }
}

/// Tape handles for a bound [`ParamSet`], in set order.
#[derive(Debug, Clone)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.0[i]
    }
}

/// Xavier-uniform `[fan_in × fan_out]` weight.
pub fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(alloc::vec![fan_in, fan_out], data).expect("positive extents")
}

/// Normal(0, std²) tensor.
pub fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("finite std");
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| dist.sample(rng)).collect()).expect("positive extents")
}
