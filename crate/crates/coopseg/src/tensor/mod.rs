//! Minimal reverse-mode autodiff over dense 4-D tensors.
//!
//! The engine provides exactly the operations the segmentation networks
//! need: `conv2d`, `relu`, `max_pool2d`, `upsample_bilinear`,
//! `concat_channels`, `softmax_cross_entropy`, plus scalar `add`/`sum`/`dot`
//! for loss assembly and test scalarization. Forward passes record onto a
//! [`Graph`] tape; [`Graph::backward`] replays it in exact reverse order.
//!
//! Conventions:
//! - activations are `[batch, channels, height, width]`, row-major;
//! - all reductions run in a fixed accumulation order, so identical seeds
//!   and inputs give bit-identical results;
//! - any op that produces a NaN/Inf returns an error instead of propagating
//!   the value.

mod kernels;

pub mod graph;
pub mod optim;

pub use graph::{Graph, TensorId};
pub use optim::{sgd_step, zero_grads, Param};

use thiserror::Error;

/// Scalar element type of the numeric core. `f32` by default; the `f64`
/// feature switches the whole engine to doubles for tight gradient checks.
#[cfg(feature = "f64")]
pub type Elem = f64;
#[cfg(not(feature = "f64"))]
pub type Elem = f32;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("expected a rank-4 [n,c,h,w] tensor, got shape {shape:?}")]
    NotRank4 { shape: Vec<usize> },
    #[error("empty batch")]
    EmptyBatch,
    #[error("channel mismatch: input has {input} channels, weight expects {weight}")]
    ChannelMismatch { input: usize, weight: usize },
    #[error(
        "non-integral conv output: ({size} + 2*{padding} - {kernel}) is not a \
         non-negative multiple of stride {stride}"
    )]
    NonIntegralConvOutput {
        size: usize,
        padding: usize,
        kernel: usize,
        stride: usize,
    },
    #[error("bias length {bias} does not match {out_channels} output channels")]
    BiasMismatch { bias: usize, out_channels: usize },
    #[error("spatial size {h}x{w} not divisible by pool size {k}")]
    PoolNotDivisible { h: usize, w: usize, k: usize },
    #[error("upsample output size must be positive, got {out_h}x{out_w}")]
    ZeroUpsample { out_h: usize, out_w: usize },
    #[error("upsample input must have positive spatial size, got {h}x{w}")]
    EmptyUpsampleInput { h: usize, w: usize },
    #[error("concat mismatch: {a:?} vs {b:?} (batch and spatial dims must agree)")]
    ConcatMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("label map shape {labels:?} does not match logits shape {logits:?}")]
    LabelShapeMismatch {
        labels: Vec<usize>,
        logits: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("graph already consumed by backward")]
    GraphConsumed,
    #[error("parameter {name} has no gradient")]
    MissingGrad { name: String },
}

/// Dense tensor: shape, row-major data, and an optional gradient buffer of
/// the same shape. Values are immutable once created; only the gradient
/// buffer (and parameter updates through the optimizer) mutate.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Elem>,
    requires_grad: bool,
    grad: Option<Vec<Elem>>,
}

impl Tensor {
    /// Builds a tensor, validating element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<Elem>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor::new" });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: Elem) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Elem] {
        &self.data
    }

    /// Mutable access to the raw values; owners use this for optimizer
    /// updates and weight surgery. Tensors already recorded on a graph are
    /// never handed out mutably.
    pub fn data_mut(&mut self) -> &mut [Elem] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[Elem]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [Elem] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value-only copy with no gradient buffer; keeps `requires_grad`.
    /// This is how parameters enter a fresh graph each pass.
    pub fn leaf_clone(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Interprets the tensor as `[n, c, h, w]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::NotRank4 {
                shape: self.shape.clone(),
            }),
        }
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar(&self) -> Elem {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }
}

/// Integer class map with shape `[h, w]` or `[n, h, w]`: per-pixel labels
/// for losses and scoring. `u8` class ids cap the class count at 256, which
/// is far beyond anything the toy benchmarks use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(LabelMap { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        LabelMap {
            shape,
            data: vec![0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Largest class id present plus one; 0 for an empty map.
    pub fn max_class_plus_one(&self) -> usize {
        self.data
            .iter()
            .copied()
            .max()
            .map_or(0, |m| m as usize + 1)
    }
}
