//! Minimal deterministic tensor arithmetic with taped reverse-mode
//! differentiation.
//!
//! A [`Graph`] records every primitive executed during a forward pass;
//! [`Graph::backward`] replays the record in reverse. Parameters live in a
//! [`ParamStore`] outside the graph and are copied in as leaves, so one
//! store can feed any number of independent graphs.

mod float;
pub mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod sampling;

pub use float::Float;
pub use graph::{Gradients, Graph, Var};
pub use kernels::conv_out_size;
pub use optim::{Adam, AdamConfig, OptimizerState};
pub use params::{Init, ParamId, ParamStore};
pub use sampling::{affine_grid_values, identity_theta, roi_band_boxes, RegionBox};

use crate::error::{shape_err, Result};

/// Dense row-major n-dimensional array.
///
/// `grad` is present iff the tensor requires a gradient, and always has the
/// same length as `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("zero-sized dimension in shape {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Attach a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![T::zero(); self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Reports the first non-finite element, if any.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(crate::error::Error::Contract(format!(
                "non-finite value {} at flat index {i} in tensor of shape {:?}",
                self.data[i], self.shape
            )));
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        let conv = |v: &T| U::lit(v.as_f64());
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(conv).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(conv).collect()),
        }
    }
}
