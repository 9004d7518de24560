//! Dense N-dimensional tensors and the forward/backward layer primitives
//! built on them.
//!
//! Layout is row-major with the last axis fastest. Volumes and feature maps
//! use channels-last `[N, D, H, W, C]`. All primitives are pure functions of
//! their inputs (dropout takes an explicit RNG), so they are trivially
//! thread-safe and bit-deterministic.

mod gradcheck;
mod ops;

pub use gradcheck::{finite_difference_grad, max_rel_error};
pub use ops::{
    batch_norm, batch_norm_backward, conv3d, conv3d_backward, dense, dense_backward, dropout,
    dropout_apply, dropout_backward, group_norm, group_norm_backward, leaky_relu,
    leaky_relu_backward, maxpool3d, maxpool3d_backward, softmax, softmax_cross_entropy,
    softmax_cross_entropy_backward, BatchNormCache, Conv3dGrads, DenseGrads, DropoutMask,
    GroupNormCache, NormState, Padding, PoolIndices,
};

use std::fmt;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type for tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + num_traits::NumAssign + Sum + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense tensor: a shape plus a flat row-major buffer (last axis fastest).
///
/// Invariants: every extent is at least 1 and `product(shape) == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel = checked_numel(shape)?;
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} elements but buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = checked_numel(shape).expect("non-empty positive extents");
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = checked_numel(shape).expect("non-empty positive extents");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = checked_numel(shape).expect("non-empty positive extents");
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Row-major strides (elements, last axis has stride 1).
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    pub fn get(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let flat: usize = index.iter().zip(self.strides()).map(|(&i, s)| i * s).sum();
        self.data[flat]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        debug_assert_eq!(index.len(), self.shape.len());
        let flat: usize = index.iter().zip(self.strides()).map(|(&i, s)| i * s).sum();
        self.data[flat] = value;
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.numel() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::ShapeMismatch("empty shape".into()));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::ShapeMismatch(format!(
            "zero extent in shape {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}
