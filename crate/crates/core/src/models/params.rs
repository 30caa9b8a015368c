use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Which network a parameter belongs to. `Shared` parameters (the deblur
/// encoder) feed both the image and the kernel decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Image,
    Shared,
    Kernel,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Image => "image",
            Role::Shared => "shared",
            Role::Kernel => "kernel",
        }
    }
}

/// Named parameter tensors. Networks refer to entries by index.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    roles: Vec<Role>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            roles: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, role: Role, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.roles.push(role);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn role(&self, i: usize) -> Role {
        self.roles[i]
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.values[i]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn numel_by_role(&self, role: Role) -> usize {
        self.values
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| **r == role)
            .map(|(v, _)| v.numel())
            .sum()
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }

    /// Registers every tensor as a constant (no gradients).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.values.iter().map(|v| tape.constant(v.clone())).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            roles: self.roles.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces the values with those of `other`, which must have the same
    /// names and shapes in the same order.
    pub fn load_from(&mut self, names: &[String], values: Vec<Tensor<T>>) -> Result<()> {
        if names.len() != self.names.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {}",
                names.len(),
                self.names.len()
            )));
        }
        for ((n, v), (own, cur)) in names.iter().zip(&values).zip(self.names.iter().zip(&self.values)) {
            if n != own || v.shape() != cur.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {n} {:?} does not match model tensor {own} {:?}",
                    v.shape(),
                    cur.shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }
}

/// He-uniform weights: `U(-a, a)` with `a = √(6 / fan_in)`, i.e. variance
/// `2 / fan_in`.
pub fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let a = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-a..a))).collect();
    Tensor::new(shape, data).expect("consistent shape")
}
