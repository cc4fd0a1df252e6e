//! Dense n-dimensional tensors over f32 or f64.
//!
//! A [`Tensor`] is an immutable value: shape plus row-major contiguous data
//! behind an `Arc`, so clones are cheap and sharing across threads is safe.
//! All arithmetic checks shapes and fails loudly on mismatch.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::Arc;

use crate::error::{LorunError, Result};
use crate::rng::Rng;

/// On-disk scalar tag (see the tensor file format).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Floating-point scalar the engine is generic over.
///
/// Training instantiates with `f32`; verification oracles run in `f64`.
pub trait Scalar:
    'static
    + Copy
    + Send
    + Sync
    + Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;
    /// Variance floor inside layer normalization.
    const NORM_EPS: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn tanh(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F32;
    const NORM_EPS: Self = 1e-6;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn ln_1p(self) -> Self {
        self.ln_1p()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    fn minimum(self, other: Self) -> Self {
        self.min(other)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F64;
    const NORM_EPS: Self = 1e-12;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn ln_1p(self) -> Self {
        self.ln_1p()
    }
    fn tanh(self) -> Self {
        self.tanh()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    fn minimum(self, other: Self) -> Self {
        self.min(other)
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(LorunError::Dimension(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(LorunError::Dimension(format!(
                "shape {shape:?} expects {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![S::ZERO; numel]),
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
        }
    }

    /// 1-element tensor of shape `[1]`.
    pub fn scalar(value: S) -> Self {
        Tensor::full(&[1], value)
    }

    /// I.i.d. Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| S::from_f64(rng.gauss_scaled(std)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> Result<S> {
        if !self.is_scalar() {
            return Err(LorunError::Contract(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(LorunError::Dimension(format!(
                "cannot reshape {:?} (numel {}) to {shape:?}",
                self.shape,
                self.numel()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|v| v * c)
    }

    /// Inner product accumulated in f64.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a.to_f64() * b.to_f64())
            .sum())
    }

    /// Euclidean norm accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(LorunError::Dimension(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Replace one element, copying the buffer. Intended for oracles and
    /// finite-difference probes, not hot paths.
    pub fn with_element(&self, flat_index: usize, value: S) -> Self {
        let mut data = self.data.as_ref().clone();
        data[flat_index] = value;
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    /// Convert elementwise into another scalar type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v.to_f64()).collect()
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_numel() {
        assert!(Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn arithmetic_checks_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 2]);
        let b = Tensor::<f64>::zeros(&[4]);
        assert!(a.add(&b).is_err());
        assert!(a.add(&a).is_ok());
    }

    #[test]
    fn reshape_shares_data() {
        let t = Tensor::<f32>::from_vec(vec![2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }
}
