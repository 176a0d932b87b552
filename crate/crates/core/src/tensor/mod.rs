//! Dense tensors with an optional gradient buffer, the layer kernels of the
//! tracking network, and the SGD optimizer.
//!
//! Layout is always row-major `batch × channel × height × width` for rank-4
//! data and `batch × features` for rank 2. Differentiation is reverse-mode
//! and layer-wise: every forward kernel has a matching `*_backward` that
//! accumulates into the `grad` buffers of its inputs and parameters.

mod element;
pub mod gradcheck;
pub mod ops;
mod optim;

use std::fmt;

pub use element::Element;
pub use optim::{sgd_step, ParamGroup};
pub(crate) use optim::combine_fingerprints;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::shape(format!("rank must be 1..=4, got {}", dims.len())));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self::new(dims, vec![T::zero(); n]).expect("zeros: invalid rank")
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Self::new(dims, vec![value; n]).expect("full: invalid rank")
    }

    pub fn scalar(value: T) -> Self {
        Self::new(&[1], vec![value]).unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) extent.
    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    /// Number of elements in one batch item.
    pub fn item_len(&self) -> usize {
        self.dims[1..].iter().product()
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

    pub fn item(&self, index: usize) -> &[T] {
        let n = self.item_len();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Allocates a zeroed gradient buffer if none exists.
    pub fn require_grad(&mut self) -> &mut Self {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        self
    }

    /// Split borrow of the data and (allocated) gradient buffer.
    pub fn data_and_grad_mut(&mut self) -> (&[T], &mut [T]) {
        self.require_grad();
        (&self.data, self.grad.as_deref_mut().unwrap())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.is_empty() || dims.len() > 4 {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Collapses every dimension after the first into a feature axis.
    pub fn flatten(self) -> Self {
        let b = self.dims[0];
        let f = self.item_len();
        self.reshape(&[b, f]).unwrap()
    }

    /// Gathers batch items in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let n = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        Self::new(&dims, data).unwrap()
    }

    /// Concatenates tensors along the batch axis.
    pub fn concat(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let tail = &first.dims[1..];
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            if &p.dims[1..] != tail {
                return Err(Error::shape(format!(
                    "concat: item shape {:?} differs from {:?}",
                    &p.dims[1..],
                    tail
                )));
            }
            batch += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        let mut dims = first.dims.clone();
        dims[0] = batch;
        Self::new(&dims, data)
    }

    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|&v| U::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}
