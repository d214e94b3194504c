use crate::error::{Result, TabError};
use crate::scalar::Scalar;

/// Dense row-major array with an optional gradient buffer.
///
/// `grad` is present iff the tensor requires gradients, and always has the
/// same length as `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TabError::Parameter(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TabError::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel], grad: None }
    }

    pub fn scalar(x: T) -> Self {
        Tensor { shape: vec![1], data: vec![x], grad: None }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: (0..numel).map(&mut f).collect(), grad: None }
    }

    /// Marks the tensor as a trainable leaf (allocates a zeroed gradient).
    pub fn requires_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![T::zero(); self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn is_requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Converts the element type, keeping the gradient flag (not its contents).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|v| U::of(v.as_f64())).collect::<Vec<_>>();
        let grad = self.grad.as_ref().map(|_| vec![U::zero(); data.len()]);
        Tensor { shape: self.shape.clone(), data, grad }
    }

    /// `(rows, cols)` view where `cols` is the last axis.
    pub fn matrix_dims(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols.max(1), cols)
    }
}
