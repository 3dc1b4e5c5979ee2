//! Dense tensors and a reverse-mode autodiff tape.
//!
//! Tensors are plain row-major buffers with the volumetric convention
//! `[batch, channel, z, y, x]` (x varies fastest). Differentiable programs are
//! recorded on a [`Tape`]; [`Tape::backward`] replays the records in reverse.
//! Everything is generic over [`Element`] so the same model and loss code runs
//! in `f32` for training and `f64` for gradient checks.

mod element;
mod gradcheck;
pub mod kernels;
mod tape;

pub use element::{pairwise_sum, Element};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.len() > 5 {
            return Err(Error::Shape(format!(
                "at most 5 axes are supported, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Shape as `[b, c, z, y, x]`; errors unless the tensor has exactly five axes.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        dims5(&self.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub(crate) fn dims5(shape: &[usize]) -> Result<[usize; 5]> {
    match shape {
        &[b, c, z, y, x] => Ok([b, c, z, y, x]),
        other => Err(Error::Shape(format!(
            "expected [batch, channel, z, y, x], got {other:?}"
        ))),
    }
}

/// Flat offset of `(b, c, z, y, x)` in a contiguous 5-D tensor.
#[inline]
pub fn offset5(dims: [usize; 5], b: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
    let [_, cc, zz, yy, xx] = dims;
    (((b * cc + c) * zz + z) * yy + y) * xx + x
}
