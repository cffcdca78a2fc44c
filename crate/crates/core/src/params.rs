//! Named parameter storage shared by the model, optimizer and checkpoints.

use std::collections::BTreeMap;
use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{GradTape, Gradients, Var};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation for freshly initialized weight matrices.
pub const INIT_STD: Scalar = 0.02;

/// Parameters keyed by name; iteration order is lexicographic and therefore
/// stable across runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) {
        t.requires_grad = true;
        self.tensors.insert(name.into(), t);
    }

    pub fn weight<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut R) {
        self.insert(name, Tensor::randn(shape, INIT_STD, rng));
    }

    /// Glorot-normal weight `[fan_in, fan_out]`: std `√(2/(fan_in+fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut R) {
        assert_eq!(shape.len(), 2, "glorot init is for matrices");
        let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt() as Scalar;
        self.insert(name, Tensor::randn(shape, std, rng));
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::ones(shape));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Put every parameter on the tape as a gradient-receiving leaf.
    pub fn register(&self, tape: &mut GradTape) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.param(t.clone())))
                .collect(),
        }
    }

    /// Add tape gradients into each parameter's `grad` store.
    pub fn accumulate_grads(&mut self, vars: &ParamVars, grads: &Gradients) {
        for (name, t) in self.tensors.iter_mut() {
            let Some(&v) = vars.vars.get(name) else { continue };
            let Some(g) = grads.get(v) else { continue };
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => t.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Replace a parameter's values, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::shape("param set", slot.shape(), t.shape()));
        }
        *slot = t;
        slot.requires_grad = true;
        Ok(())
    }
}

/// Tape handles for a registered [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        ParamVars { vars: iter.into_iter().collect() }
    }
}

impl Index<&str> for ParamVars {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} was not registered"))
    }
}
