//! Dense row-major f64 tensors. This is deliberately minimal: enough for
//! small convolutional models plus the attention arithmetic built on top —
//! no broadcasting (bias add inside the fused ops is the one exception),
//! no views, no strides. Feature maps are stored channels-last as
//! `[height, width, channels]`.
//!
//! Values live behind an `Arc` so that binding a parameter into a compute
//! graph is a pointer copy, not a data copy. A tensor is immutable once
//! built except through [`Tensor::data_mut`], which the optimizer uses for
//! in-place updates (and which drops any stale gradient).

mod graph;
mod io;

pub use graph::{Graph, Var};
pub use io::{read_tensor, write_tensor};

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Build from explicit shape and values; the value count must match the
    /// shape product. Rank 0 (empty shape, one value) is a scalar.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} values, got {}", shape, expect, data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data), grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![0.0; n]), grad: None, requires_grad: false }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; n]), grad: None, requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![value]), grad: None, requires_grad: false }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| f(i)).collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data), grad: None, requires_grad: false }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for explicit updates. Invalidates any stored gradient,
    /// since it was computed for the old values.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.grad = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Marks this tensor as a trainable leaf: graphs it is bound into will
    /// produce a gradient for it on backward.
    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Stable identity of the underlying buffer; two tensors that share
    /// storage compare equal. The compute graph uses this to recognise a
    /// parameter that is bound more than once.
    pub(crate) fn buffer_id(&self) -> usize {
        Arc::as_ptr(&self.data) as usize
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {} out of bounds at axis {}", ix, i);
            off = off * dim + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// Exact value equality (shape and every f64 bit pattern).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn approx_eq(&self, other: &Tensor, tol: f64) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| (a - b).abs() <= tol)
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}
