use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Trace, Var};

/// Index of a parameter inside a [`ParamStore`].
pub type ParamId = usize;

/// Named parameters in registration order. The order is part of the
/// checkpoint contract.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, trace: &mut Trace) -> Vec<Var> {
        self.tensors.iter().map(|t| trace.param(t.clone())).collect()
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, trace: &mut Trace) -> Vec<Var> {
        self.tensors.iter().map(|t| trace.constant(t.clone())).collect()
    }

    /// Replaces all tensors, requiring identical names and shapes.
    pub fn load_from(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::Shape {
                name: "<checkpoint>".into(),
                msg: format!("checkpoint has {} parameters, model expects {}", named.len(), self.len()),
            });
        }
        for (i, (name, tensor)) in named.iter().enumerate() {
            if *name != self.names[i] {
                return Err(Error::Shape {
                    name: name.clone(),
                    msg: format!("expected parameter `{}` at position {i}", self.names[i]),
                });
            }
            if tensor.shape() != self.tensors[i].shape() {
                return Err(Error::Shape {
                    name: name.clone(),
                    msg: format!(
                        "checkpoint shape {:?} vs model shape {:?}",
                        tensor.shape(),
                        self.tensors[i].shape()
                    ),
                });
            }
        }
        self.tensors = named.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("sized")
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}

pub fn filled(shape: &[usize], value: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![value; n]).expect("sized")
}
