use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Tensor,
    #[serde(skip, default)]
    grad: Vec<f64>,
}

/// Equality compares values only; the gradient buffer is scratch space.
impl PartialEq for Parameter {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value
    }
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    fn ensure_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
    }
}

/// Named learnable tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    params: BTreeMap<String, Parameter>,
}

/// Tape handles for a [`ParameterSet`] bound onto one tape.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles from explicit `(name, var)` pairs.
    pub fn from_vars<S: Into<String>>(pairs: impl IntoIterator<Item = (S, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().map(|(n, v)| (n.into(), v)).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"))
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Parameter::new(value));
    }

    /// Uniform in `[-a, a]` with `a = sqrt(1 / fan_in)`.
    pub fn insert_fan_in_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape, data).expect("length from shape"));
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Pushes every parameter onto `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Pushes every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.constant(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Adds the tape gradients of each bound parameter into its slot.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (name, p) in self.params.iter_mut() {
            p.ensure_grad();
            if let Some(var) = bound.vars.get(name) {
                if let Some(g) = grads.get(*var) {
                    p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.ensure_grad();
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Plain gradient descent: `value -= step · grad`.
    pub fn descend(&mut self, step: f64) {
        for p in self.params.values_mut() {
            p.ensure_grad();
            for (v, g) in p.value.data_mut().iter_mut().zip(&p.grad) {
                *v -= step * g;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
    }
}
