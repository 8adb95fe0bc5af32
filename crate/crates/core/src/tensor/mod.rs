//! Dense row-major tensors with a reverse-mode gradient tape.
//!
//! A [`Tensor`] is an immutable buffer plus an optional handle to the
//! [`Tape`] node that produced it. Operations on tensors that live on a tape
//! record a backward rule; operations on constants just compute.

mod checkpoint;
mod conv;
mod element;
mod elementwise;
mod gradcheck;
mod index;
mod matmul;
mod reduce;
mod sample;
mod softmax;
mod tape;

use std::fmt;
use std::rc::Rc;

use rand::Rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use element::Element;
pub use gradcheck::{grad_check, grad_check_mixed, grad_check_with, GradCheckReport};
pub use tape::{Gradients, Tape};

pub(crate) use element::{gemm, MatView};

use crate::error::{Error, Result};

pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    var: Option<(Tape<T>, usize)>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            var: self.var.clone(),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.numel() <= 16 {
            s.field("data", &self.data);
        }
        s.field("requires_grad", &self.requires_grad()).finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape,
                reason: format!("buffer holds {} elements", data.len()),
            });
        }
        Ok(Self::from_shared(shape, Rc::new(data)))
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Rc<Vec<T>>) -> Self {
        Tensor {
            shape,
            data,
            var: None,
        }
    }

    pub(crate) fn with_var(shape: Vec<usize>, data: Rc<Vec<T>>, tape: Tape<T>, id: usize) -> Self {
        Tensor {
            shape,
            data,
            var: Some((tape, id)),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_shared(shape.to_vec(), Rc::new(vec![value; n]))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_shared(Vec::new(), Rc::new(vec![value]))
    }

    /// Row-major values `f(flat_index)`.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self::from_shared(shape.to_vec(), Rc::new((0..n).map(f).collect()))
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::of(rng.gen_range(lo..hi)))
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
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

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub(crate) fn shared_data(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank());
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of range on axis {i} of {:?}", self.shape);
            off = off * d + ix;
        }
        self.data[off]
    }

    pub fn requires_grad(&self) -> bool {
        self.var.is_some()
    }

    pub(crate) fn var(&self) -> Option<(&Tape<T>, usize)> {
        self.var.as_ref().map(|(t, id)| (t, *id))
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.var.as_ref().map(|(t, _)| t)
    }

    /// Same values, cut from the tape.
    pub fn detach(&self) -> Self {
        Self::from_shared(self.shape.clone(), Rc::clone(&self.data))
    }

    /// Reverse sweep from this scalar.
    pub fn backward(&self) -> Result<Gradients<T>> {
        match &self.var {
            Some((tape, _)) => tape.backward(self),
            None => Tape::new().backward(self),
        }
    }

    /// Element-type conversion; the result is a constant.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_shared(
            self.shape.clone(),
            Rc::new(self.data.iter().map(|v| U::of(v.as_f64())).collect()),
        )
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn mean_value(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.numel().max(1) as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::InvalidAxis { op, axis, rank })
    } else {
        Ok(())
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
