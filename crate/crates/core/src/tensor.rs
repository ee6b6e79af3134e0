//! Dense row-major arrays and the scalar trait shared by the f32 and f64 engines.

use std::fmt;

use num_traits::{Float, NumAssign};
use thiserror::Error;

/// Floating point scalar the engine can run on.
///
/// Training uses `f32`; gradient verification uses `f64` because central
/// differences are too noisy at single precision.
pub trait Real:
    Float + NumAssign + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("dimension error on {axis}: expected {expected}, found {found}")]
    Mismatch {
        axis: String,
        expected: usize,
        found: usize,
    },
    #[error("rank error: {op} expects rank {expected}, found rank {found}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

impl ShapeError {
    pub fn mismatch(axis: impl Into<String>, expected: usize, found: usize) -> Self {
        ShapeError::Mismatch {
            axis: axis.into(),
            expected,
            found,
        }
    }
}

/// Dense multidimensional array, last axis fastest.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    /// Same length as `data` when present.
    pub grad: Option<Vec<T>>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Copy> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, ShapeError> {
        if numel(shape) != data.len() {
            return Err(ShapeError::Invalid(format!(
                "shape {:?} holds {} values, data has {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &n)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < n, "index {ix} out of range on axis {i}");
            off = off * n + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, ShapeError> {
        if numel(shape) != self.data.len() {
            return Err(ShapeError::Invalid(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self, ShapeError> {
        let first = items
            .first()
            .ok_or_else(|| ShapeError::Invalid("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for (i, t) in items.iter().enumerate() {
            if t.shape != first.shape {
                return Err(ShapeError::Invalid(format!(
                    "stack item {i} has shape {:?}, expected {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::from_vec(&shape, data)
    }
}

impl<R: Real> Tensor<R> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, R::zero())
    }

    pub fn scalar(v: R) -> Self {
        Tensor::full(&[], v)
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        self.map(|v| S::lit(v.as_f64()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> R {
        self.data.iter().copied().sum()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

impl Tensor<f64> {
    pub fn max_abs_diff(&self, other: &Tensor<f64>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A trainable tensor with a stable, unique name such as `blocks.0.head.1.m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<R> {
    pub name: String,
    pub tensor: Tensor<R>,
}

impl<R: Real> Parameter<R> {
    pub fn new(name: impl Into<String>, mut tensor: Tensor<R>) -> Self {
        tensor.requires_grad = true;
        Parameter {
            name: name.into(),
            tensor,
        }
    }

    /// Stores a freshly computed gradient, replacing the old one unless
    /// `accumulate` is set.
    pub fn set_grad(&mut self, grad: &[R], accumulate: bool) {
        debug_assert_eq!(grad.len(), self.tensor.len());
        match (&mut self.tensor.grad, accumulate) {
            (Some(existing), true) => {
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e += *g;
                }
            }
            (slot, _) => *slot = Some(grad.to_vec()),
        }
    }

    pub fn grad(&self) -> Option<&[R]> {
        self.tensor.grad.as_deref()
    }
}
