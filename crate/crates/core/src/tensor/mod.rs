//! Dense tensors and a small define-by-run reverse-mode autodiff engine.
//!
//! A [`Graph`] is rebuilt for every sequence. Leaves are copied in from
//! parameter tensors, operations append nodes, and a single call to
//! [`Graph::backward`] walks the nodes in reverse append order.
//!
//! Parameters and activations are stored as `f32` during training. The
//! engine is generic over [`Scalar`] so gradient checks can run the exact
//! same code path in `f64`.

mod container;
mod gradcheck;
mod graph;

use std::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use container::{decode_tensors, encode_tensors, load_tensors, save_tensors, ContainerError};
pub use gradcheck::{
    analytic_gradients, compare_gradients, grad_check, numeric_gradients, GradCheckConfig,
    GradCheckReport, ParamDeviation,
};
pub use graph::{superpose_stack, Gradients, Graph, NodeId, OpKind};

/// Floating point element type used by tensors and graphs.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph was already consumed by a backward pass")]
    GraphConsumed,
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("{0}")]
    Invalid(String),
}

/// Row-major dense tensor with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    #[serde(default)]
    pub requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::Invalid(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: F) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient accumulator, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[F]) -> Result<(), AutodiffError> {
        if g.len() != self.data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        let acc = self
            .grad
            .get_or_insert_with(|| vec![F::zero(); self.data.len()]);
        for (a, &b) in acc.iter_mut().zip(g) {
            *a = *a + b;
        }
        Ok(())
    }

    /// True when any value or gradient entry is NaN or infinite.
    pub fn has_fault(&self) -> bool {
        self.data.iter().any(|x| !x.is_finite())
            || self
                .grad
                .as_ref()
                .is_some_and(|g| g.iter().any(|x| !x.is_finite()))
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|x| G::of(x.f64())).collect()),
        }
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }
}
