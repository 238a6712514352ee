//! Dense N-dimensional `f64` tensor with reverse-mode autodiff.
//!
//! [`Tensor`] is the plain value type (shape + row-major values + optional
//! gradient). [`Graph`] is the recording tape: forward ops append nodes, and
//! `backward` replays the tape once in reverse. [`gradcheck`] holds the
//! central-difference oracle used to validate every differentiable op.

mod conv;
mod graph;
pub mod gradcheck;

pub use graph::{sigmoid, Bindings, CustomOp, Graph, NodeRef};

use crate::error::{CoreError, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense row-major tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Filled by `Graph::backward` on tape nodes; `None` on plain values.
    pub grad: Option<Vec<f64>>,
    /// Leaves with `requires_grad` receive gradients during backward.
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(CoreError::InvalidShape("rank must be >= 1".into()));
        }
        if shape.contains(&0) {
            return Err(CoreError::InvalidShape(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(CoreError::InvalidShape(format!(
                "shape {shape:?} wants {n} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("full: valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor::new(shape.to_vec(), values).expect("randn: valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Same values, different shape. Element count must match.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.values.len() || shape.is_empty() || shape.contains(&0) {
            return Err(CoreError::InvalidShape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        Tensor::new(shape, self.values.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Flat index for a `[C, H, W]` tensor.
    #[inline]
    pub fn idx3(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (c * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[self.idx3(c, y, x)]
    }
}
