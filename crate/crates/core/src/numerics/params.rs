use std::collections::HashMap;

use crate::error::{Result, TabError};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
///
/// Gradients accumulate across graphs until [`ParamStore::zero_grad`] is called.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TabError::Parameter(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.requires_grad());
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.zero_grad());
    }

    /// Adds `grads` (one flat buffer per parameter, in id order) into the stored gradients.
    pub fn add_grads(&mut self, grads: &GradBuffer<T>) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.0) {
            if let (Some(dst), Some(src)) = (t.grad_mut(), g.as_ref()) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += *s;
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Per-parameter gradient buffers produced by one graph, summed in a fixed order.
#[derive(Clone, Debug)]
pub struct GradBuffer<T>(pub Vec<Option<Vec<T>>>);

impl<T: Scalar> GradBuffer<T> {
    pub fn new(num_params: usize) -> Self {
        GradBuffer(vec![None; num_params])
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[T]) {
        match &mut self.0[id.0] {
            Some(dst) => dst.iter_mut().zip(grad).for_each(|(d, s)| *d += *s),
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    pub fn merge(&mut self, other: &GradBuffer<T>) {
        for (i, g) in other.0.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.0[id.0].as_deref()
    }
}
