//! Dense row-major tensors and reverse-mode automatic differentiation.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, op_probes, GradCheckReport, OpProbe};
pub use tape::{Tape, ValueId};

use std::fmt::Debug;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Scalar element type of a tensor. Training and inference run in `f32`;
/// gradient checking runs the same graphs in `f64`.
pub trait Element:
    num_traits::Float + num_traits::NumAssign + Copy + Default + Debug + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn erf(self) -> Self;
}

impl Element for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erf(self as f64) as f32
    }
}

impl Element for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Dense row-major tensor with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![E::zero(); numel], grad: None, requires_grad: false }
    }

    pub fn filled(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], grad: None, requires_grad: false }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> E) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor { shape, data, grad: None, requires_grad: false }
    }

    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None, requires_grad: false }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[E]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![E::zero(); self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Errors if any element is NaN or infinite.
    pub fn validate_finite(&self, op: &'static str) -> Result<(), TensorError> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn map<F: Element>(&self, f: impl Fn(E) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|x| x.to_f64())
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|x| x.to_f64() as f32)
    }
}

/// Row-major matrix product `a[m,k] * b[k,n]` on raw slices.
pub fn matmul_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for row in 0..m {
        let arow = &a[row * k..(row + 1) * k];
        let orow = &mut out[row * n..(row + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == E::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `a[m,k] * b[n,k]^T`, accumulating into `out[m,n]`.
pub fn matmul_nt_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for row in 0..m {
        let arow = &a[row * k..(row + 1) * k];
        let orow = &mut out[row * n..(row + 1) * n];
        for (col, o) in orow.iter_mut().enumerate() {
            let brow = &b[col * k..(col + 1) * k];
            let mut acc = E::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `a[k,m]^T * b[k,n]`, accumulating into `out[m,n]`.
pub fn matmul_tn_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (row, &av) in arow.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let orow = &mut out[row * n..(row + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
