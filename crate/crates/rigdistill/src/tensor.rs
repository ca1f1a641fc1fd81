//! Flat row-major tensors and the scalar abstraction shared by the f32
//! production path and the f64 shadow path used for gradient checking.

use thiserror::Error;

use crate::math;

/// Scalar type the kernels are generic over. f32 is the production type;
/// f64 exists so gradient checks run above the single-precision noise floor.
pub trait Real:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite_scalar(self) -> bool;
    fn gelu(self) -> Self;
    fn gelu_grad(self) -> Self;
    /// `self * b + acc`, contracted to a fused multiply-add when the target
    /// has one (the workspace builds with `target-cpu=native`).
    fn fma(self, b: Self, acc: Self) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    #[inline]
    fn is_finite_scalar(self) -> bool {
        self.is_finite()
    }
    #[inline]
    fn gelu(self) -> Self {
        math::gelu_f32(self)
    }
    #[inline]
    fn gelu_grad(self) -> Self {
        math::gelu_grad_f32(self)
    }
    #[inline]
    fn fma(self, b: Self, acc: Self) -> Self {
        #[cfg(target_feature = "fma")]
        {
            self.mul_add(b, acc)
        }
        #[cfg(not(target_feature = "fma"))]
        {
            self * b + acc
        }
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn is_finite_scalar(self) -> bool {
        self.is_finite()
    }
    #[inline]
    fn gelu(self) -> Self {
        math::gelu_f64(self)
    }
    #[inline]
    fn gelu_grad(self) -> Self {
        math::gelu_grad_f64(self)
    }
    #[inline]
    fn fma(self, b: Self, acc: Self) -> Self {
        #[cfg(target_feature = "fma")]
        {
            self.mul_add(b, acc)
        }
        #[cfg(not(target_feature = "fma"))]
        {
            self * b + acc
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} values, data has {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
}

/// Dense tensor, row-major. Feature maps are stored time-major: shape
/// `[len, channels]` with the channel axis contiguous, which keeps every
/// convolution window a single contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Build a tensor, rejecting shape/data disagreement and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite_scalar()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::ZERO; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Result<Self, TensorError> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
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

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite_scalar())
    }

    /// Cast element-wise via f64; used to lift f32 parameters onto the
    /// double-precision shadow path.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_shape_product() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { expected: 6, actual: 5, .. }));
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![3], vec![0.0, f32::NAN, 1.0]).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { index: 1 });
        let err = Tensor::new(vec![2], vec![f32::INFINITY, 1.0]).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { index: 0 });
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(2.5f32);
        assert!(t.is_scalar());
        assert_eq!(t.numel(), 1);
    }

    #[test]
    fn cast_roundtrips_exactly_for_f32_values() {
        let t = Tensor::from_vec(vec![1.5f32, -0.25, 3.125e-3]).unwrap();
        let up: Tensor<f64> = t.cast();
        let down: Tensor<f32> = up.cast();
        assert_eq!(t, down);
    }
}
