use std::fmt::Debug;
use std::sync::Arc;

use crate::error::NumError;

/// Element type for tensors. `f32` is the default compute dtype; the
/// gradient-oracle tests run everything in `f64` because single-precision
/// finite differences are too noisy for tight tolerances.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + Debug + Send + Sync + 'static
{
    const DTYPE_CODE: u8;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
    const BYTE_WIDTH: usize;
}

impl Real for f32 {
    const DTYPE_CODE: u8 = 1;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
    const BYTE_WIDTH: usize = 4;
}

impl Real for f64 {
    const DTYPE_CODE: u8 = 2;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
    const BYTE_WIDTH: usize = 8;
}

/// Immutable dense tensor with row-major storage.
///
/// Data lives behind an `Arc`, so cloning a tensor and uploading it onto a
/// [`crate::Tape`] is cheap. Once constructed a tensor is never mutated;
/// operations produce new tensors.
#[derive(Debug, Clone)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, checking that `data` matches the shape product.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NumError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumError::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// `from_vec` for callers that have already validated the shape.
    /// Panics on mismatch.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        Self::from_vec(shape, data).expect("tensor shape/data mismatch")
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![T::zero(); n]),
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Scalar extraction; panics if the tensor has more than one element.
    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    /// Row count / column count for rank-2 tensors.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on shape {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Elementwise combine with another tensor of identical shape.
    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(
            self.shape, other.shape,
            "zip shape mismatch {:?} vs {:?}",
            self.shape, other.shape
        );
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn linf_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs().as_f64()).sum()
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    /// Converts element type, e.g. an `f32` checkpoint tensor into the `f64`
    /// tensors the gradient-oracle tests run on.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect()),
        }
    }

    /// Raw little-endian payload, row-major. Used by the QTNS writer and by
    /// checksum/byte-identity comparisons.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::BYTE_WIDTH);
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes_vec());
        }
        out
    }
}

impl<T: Real> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a == b || (a.is_nan() && b.is_nan()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_shape_product() {
        let err = Tensor::from_vec(vec![2, 3], vec![1.0f32; 5]).unwrap_err();
        match err {
            NumError::ShapeMismatch {
                expected, actual, ..
            } => {
                assert_eq!(expected, 6);
                assert_eq!(actual, 5);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn cast_round_trips_values() {
        let t = Tensor::new(vec![3], vec![1.5f32, -2.0, 0.25]);
        let d: Tensor<f64> = t.cast();
        assert_eq!(d.as_slice(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn zip_and_map() {
        let a = Tensor::new(vec![2], vec![1.0f64, 2.0]);
        let b = Tensor::new(vec![2], vec![10.0f64, 20.0]);
        let c = a.zip(&b, |x, y| x + y);
        assert_eq!(c.as_slice(), &[11.0, 22.0]);
        assert_eq!(c.map(|x| x * 2.0).as_slice(), &[22.0, 44.0]);
    }
}
