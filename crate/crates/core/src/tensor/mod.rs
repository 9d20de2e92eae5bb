//! Dense row-major tensors.
//!
//! Storage is generic over [`Real`] so the same model code runs in 32-bit for
//! training and in 64-bit for gradient audits. Files are always 32-bit.

mod io;

use std::fmt::{Debug, Display};

use num_traits::Float;

use crate::error::{Error, Result};

pub use io::{decode_vdtn, encode_vdtn, read_vdtn, write_vdtn, VDTN_MAGIC, VDTN_VERSION};

/// Floating-point element type of a [`Tensor`].
pub trait Real: Float + Default + Debug + Display + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::shape("tensor", "dims", "rank must be at least 1"));
        }
        if dims.contains(&0) {
            return Err(Error::shape("tensor", "dims", format!("{dims:?} has a zero extent")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                "data",
                format!("{} values for dims {dims:?} (expected {n})", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], v: T) -> Self {
        let n = dims.iter().product();
        Self::new(dims.to_vec(), vec![v; n]).expect("valid dims")
    }

    pub fn scalar(v: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(dims.to_vec(), data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("rank >= 1")
    }

    /// Product of all axes except the last.
    pub fn rows(&self) -> usize {
        self.len() / self.last_dim()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.dims[1] + j]
    }

    pub fn reshaped(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.len() || dims.is_empty() || dims.contains(&0) {
            return Err(Error::shape(
                "reshape",
                "input",
                format!("{:?} -> {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of squares, accumulated in 64-bit.
    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }

    /// Row `i` of the tensor viewed as `[rows, last_dim]`.
    pub fn row(&self, i: usize) -> &[T] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_payload() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("expected 6"));
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn cast_round_trip() {
        let t = Tensor::<f32>::from_f64(&[2, 2], &[1.0, -2.5, 0.125, 3.0]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}
