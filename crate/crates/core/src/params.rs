//! Named parameter arrays of a model.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Array, Real};

/// Parameters keyed by unique name; iteration is in sorted name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T> {
    arrays: BTreeMap<String, Array<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) -> Result<()> {
        let name = name.into();
        if self.arrays.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.arrays.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.arrays.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array<T>)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array<T>)> {
        self.arrays.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.arrays.values().map(Array::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Registers every array as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.arrays {
            vars.insert(name.clone(), g.param(value.clone())?);
        }
        Ok(BoundParams { vars })
    }
}

/// Graph handles of a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    /// Collects per-parameter gradients; parameters unreachable from the loss get zeros.
    pub fn gradients<T: Real>(&self, g: &Graph<T>, grads: &mut Gradients<T>) -> BTreeMap<String, Array<T>> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let grad = grads
                    .take(v)
                    .unwrap_or_else(|| Array::zeros(g.value(v).shape()));
                (name.clone(), grad)
            })
            .collect()
    }
}

/// Centered uniform initialization scaled by fan-in, with the gain of a
/// leaky-ReLU of the given slope.
pub fn init_kernel<T: Real>(shape: &[usize], slope: f64, rng: &mut impl Rng) -> Array<T> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
    Array::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}
