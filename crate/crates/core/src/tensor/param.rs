use alloc::string::String;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use super::graph::Gradients;
use super::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor4,
    pub grad: Tensor4,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor4) -> Self {
        let grad = Tensor4::zeros(value.dims());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// An ordered, name-addressable collection of parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the parameter gradients of a backward pass to the grad slots and
    /// reports which parameters received one.
    pub fn accumulate(&mut self, grads: Gradients) -> Vec<bool> {
        self.params
            .iter_mut()
            .zip(grads.into_params())
            .map(|(p, g)| match g {
                Some(g) => {
                    p.grad.add_assign(&g);
                    true
                }
                None => false,
            })
            .collect()
    }
}

impl Index<ParamId> for ParamSet {
    type Output = Parameter;

    fn index(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }
}

impl IndexMut<ParamId> for ParamSet {
    fn index_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }
}
