//! Dense row-major tensors of rank 0 to 3.
//!
//! Storage is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference verification. Arithmetic inside
//! every op is carried out in `f64` and rounded back to the storage type.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

/// Storage element for tensors.
pub trait Real: Copy + Default + PartialEq + PartialOrd + fmt::Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

pub const MAX_RANK: usize = 3;

/// Tensor shape with rank at most [`MAX_RANK`]. Rank 0 is a scalar.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: [usize; MAX_RANK],
    rank: u8,
}

impl Shape {
    pub const SCALAR: Shape = Shape { dims: [0; MAX_RANK], rank: 0 };

    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::Dimension(alloc::format!("rank {} exceeds {}", dims.len(), MAX_RANK)));
        }
        let mut out = [0; MAX_RANK];
        out[..dims.len()].copy_from_slice(dims);
        Ok(Shape { dims: out, rank: dims.len() as u8 })
    }

    pub fn vector(n: usize) -> Self {
        Shape { dims: [n, 0, 0], rank: 1 }
    }

    pub fn matrix(r: usize, c: usize) -> Self {
        Shape { dims: [r, c, 0], rank: 2 }
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank as usize]
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last(&self) -> usize {
        self.dims().last().copied().unwrap_or(1)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

/// A dense tensor with an optional gradient buffer.
///
/// `grad` is present iff `requires_grad` is set and always has the same shape
/// as the data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Shape,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::Dimension(alloc::format!("shape {:?} holds {} values, got {}", dims, shape.numel(), data.len())));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn with_shape(shape: Shape, data: Vec<T>) -> Result<Self> {
        Self::from_vec(shape.dims(), data)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Ok(Tensor { shape, data: vec![T::default(); shape.numel()], requires_grad: false, grad: None })
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Ok(Tensor { shape, data: vec![value; shape.numel()], requires_grad: false, grad: None })
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: Shape::SCALAR, data: vec![v], requires_grad: false, grad: None }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor { shape: Shape::vector(data.len()), data, requires_grad: false, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(&[rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![T::default(); n * n];
        for i in 0..n {
            data[i * n + i] = T::from_f64(1.0);
        }
        Tensor { shape: Shape::matrix(n, n), data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(alloc::format!("item() on tensor of shape {}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor as trainable, allocating a zeroed gradient buffer.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        self.grad = if on { Some(vec![T::default(); self.data.len()]) } else { None };
    }

    pub fn trainable(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::default());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[f64]) {
        if let Some(g) = self.grad.as_mut() {
            for (gi, d) in g.iter_mut().zip(delta) {
                *gi = T::from_f64(gi.to_f64() + d);
            }
        }
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Tensor::from_vec(dims, self.data.clone())
    }

    /// Converts the storage type, dropping any gradient buffer.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(), requires_grad: false, grad: None }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&self, i: usize) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(Error::Dimension(alloc::format!("row() needs a matrix, got {}", self.shape)));
        }
        let (r, c) = (self.dims()[0], self.dims()[1]);
        if i >= r {
            return Err(Error::Dimension(alloc::format!("row {} out of range for {} rows", i, r)));
        }
        Ok(Tensor::vector(self.data[i * c..(i + 1) * c].to_vec()))
    }

    /// Copies frames `[start, start+len)` along axis 1 of a `[l, m, h]` tensor.
    pub fn narrow_frames(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        if self.rank() != 3 {
            return Err(Error::Dimension(alloc::format!("narrow_frames needs rank 3, got {}", self.shape)));
        }
        let (l, m, h) = (self.dims()[0], self.dims()[1], self.dims()[2]);
        if start + len > m {
            return Err(Error::Dimension(alloc::format!("frames {}..{} out of range {}", start, start + len, m)));
        }
        let mut out = Vec::with_capacity(l * len * h);
        for layer in 0..l {
            let base = layer * m * h;
            out.extend_from_slice(&self.data[base + start * h..base + (start + len) * h]);
        }
        Tensor::from_vec(&[l, len, h], out)
    }
}
