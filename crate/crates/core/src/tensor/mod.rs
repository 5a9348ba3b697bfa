//! Dense `f64` tensors and a small reverse-mode differentiation engine.
//!
//! [`Tensor`] is plain storage: a row-major buffer plus an optional gradient
//! buffer. Computation happens on a [`Graph`], which records every operation
//! as a node and replays them in reverse on [`Graph::backward`].

mod gradcheck;
mod graph;

pub use gradcheck::grad_check;
pub use graph::{Graph, Var};

use std::hash::{DefaultHasher, Hasher};

use rand::Rng;

use crate::error::{Error, Result};

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel(&shape),
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

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let data = vec![0.0; numel(&shape)];
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a tensor from row vectors of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Independent draws from uniform(-bound, bound).
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.random_range(-bound..bound);
        }
        t
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Slice of the `i`-th entry along the leading axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.data.len() / self.shape[0];
        &self.data[i * width..(i + 1) * width]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer. Tensors that do not require
    /// gradients ignore the call.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.data.len() {
            return Err(Error::dim(format!(
                "gradient of length {} for tensor {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Hash of the shape and the exact bit patterns of the values.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        checksum_into(self, &mut h);
        h.finish()
    }
}

pub(crate) fn checksum_into(t: &Tensor, h: &mut DefaultHasher) {
    for &d in &t.shape {
        h.write_usize(d);
    }
    for v in &t.data {
        h.write_u64(v.to_bits());
    }
}

/// Combined checksum over several tensors, order-sensitive.
pub fn checksum_all<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut h = DefaultHasher::new();
    for t in tensors {
        checksum_into(t, &mut h);
    }
    h.finish()
}
