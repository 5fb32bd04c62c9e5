//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! The engine covers exactly the operator set the supernet needs: 3D
//! convolution, non-overlapping average pooling, nearest-neighbor upsampling,
//! batch normalization, a global-average-pool classifier head, ReLU, softmax
//! and log-sum-exp over logit vectors, cross entropy, and a handful of
//! combining ops. Storage is 32-bit floating point for training; every op is
//! generic over [`Scalar`] so the same code runs in a 64-bit verification mode
//! for gradient checks. Reductions accumulate in 64-bit and round once at the
//! end, which keeps results identical regardless of internal parallelism.

mod gradcheck;
mod kernels;
mod params;
mod tape;

pub use gradcheck::{finite_difference, grad_check, rel_err, CheckedOp, GradCheckReport, FD_EPSILON};
pub use kernels::{conv_out_extent, pool_out_extent, ConvGeom};
pub use params::{Gradients, Param, ParamKind, ParamStore};
pub use tape::{NodeGrads, NodeId, NormMode, Tape};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Element type of a tensor: `f32` for training, `f64` for the gradient
/// verification mode.
pub trait Scalar:
    Copy + PartialOrd + PartialEq + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

pub const MAX_RANK: usize = 5;

/// Immutable dense array of rank 1..=5, row-major, last axis fastest.
///
/// Cloning is cheap: the value buffer is shared. A tensor optionally carries a
/// handle into the tape that produced it, which is how gradients find their
/// way back during [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    node: Option<NodeId>,
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::shape(
                "tensor",
                format!("rank must be 1..={MAX_RANK}, got {}", shape.len()),
            ));
        }
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![E::ZERO; numel]).expect("zeros: valid shape")
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("full: valid shape")
    }

    pub fn scalar(value: E) -> Self {
        Tensor::from_vec(&[1], vec![value]).expect("scalar")
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::from_vec(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    /// He-normal initializer: Normal(0, sqrt(2 / fan_in)), drawn from `rng`.
    pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut crate::rng::Rng) -> Self {
        let numel: usize = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..numel)
            .map(|_| E::from_f64(rng.next_normal() * std))
            .collect();
        Tensor::from_vec(shape, data).expect("he_normal: valid shape")
    }

    /// Uniform in [lo, hi), drawn from `rng`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut crate::rng::Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| E::from_f64(lo + (hi - lo) * rng.next_f64()))
            .collect();
        Tensor::from_vec(shape, data).expect("uniform: valid shape")
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

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: Option<NodeId>) -> Self {
        self.node = node;
        self
    }

    /// Detached copy: same storage, no tape handle.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Single value of a scalar (length-1) tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// The five extents of a rank-5 tensor.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        if self.shape.len() != 5 {
            return Err(Error::shape(
                "tensor",
                format!("expected rank 5, got shape {:?}", self.shape),
            ));
        }
        Ok([
            self.shape[0],
            self.shape[1],
            self.shape[2],
            self.shape[3],
            self.shape[4],
        ])
    }

    /// Exact bit equality of shape and values.
    pub fn bits_eq(&self, other: &Tensor<E>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }
}
