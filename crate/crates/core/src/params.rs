//! Named parameter tables and their binding onto a tape.

use crate::autodiff::{Tape, Var};
use crate::error::{FraError, Result};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Insertion-ordered map of parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| FraError::load(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks that `other` holds exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        let mut missing = Vec::new();
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => missing.push(format!("{name} (shape {:?}, expected {:?})", o.shape(), t.shape())),
                None => missing.push(name.clone()),
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(FraError::load(format!("checkpoint tensors missing or mis-shaped: {}", missing.join(", "))))
        }
    }

    /// Records every tensor as a leaf; `trainable` leaves collect gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        Bound { vars }
    }
}

/// Parameter name to tape handle, valid for the tape it was bound on.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// `U(−b, b)` with `b = gain·sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, bound)
}

/// `U(−b, b)` with `b = sqrt(6 / fan_in)`, for layers followed by ReLU.
pub fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    uniform(rng, shape, (6.0 / fan_in as f64).sqrt())
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from product")
}
