//! Dense tensors, a recorded differentiation graph and a finite-difference
//! gradient checker.

mod graph;
pub mod gradcheck;
pub(crate) mod kernels;

pub use graph::{Gradients, Graph, ParamId, Var, MASK_FILL};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array. Rank 0 is a scalar holding one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "extents must be >= 1".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("holds {} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Builds a tensor from `f64` values, converting to `T`.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Row `i` of the tensor viewed as `[len / last, last]`.
    pub fn row(&self, i: usize) -> &[T] {
        let d = *self.shape.last().unwrap_or(&1);
        &self.data[i * d..(i + 1) * d]
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}
