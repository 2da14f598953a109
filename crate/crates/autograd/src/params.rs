//! Named parameter storage and binding onto a [`Graph`].

use rand::Rng;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of a model's trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under `name`. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `graph` as a leaf. With `trainable = false`
    /// the leaves are constants: gradients still flow *through* the model to
    /// its inputs, but nothing is accumulated for the parameters.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| graph.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

/// A [`ParamStore`] placed on a graph.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// Pulls this binding's parameter gradients out of `grads`, in store
    /// order.
    pub fn grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| grads.take(*v)).collect()
    }
}

/// Uniform `U(−bound, bound)` initialization.
pub fn uniform(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// He-style uniform initialization for a layer with `fan_in` inputs feeding
/// a leaky-ReLU of the given negative slope.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, slope: f32, rng: &mut impl Rng) -> Tensor {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let bound = gain * (3.0 / fan_in as f32).sqrt();
    uniform(shape, bound, rng)
}
