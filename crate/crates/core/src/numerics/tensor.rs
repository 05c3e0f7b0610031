use serde::{Deserialize, Serialize};

use crate::error::{Result, TallError};

/// Element precision of a tensor.
///
/// Values are always held as `f64`; an `F32` tensor keeps every stored value
/// rounded to the nearest `f32`, so it carries exactly single-precision
/// information and serializes losslessly as 4-byte floats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    pub(crate) fn round_slice(self, data: &mut [f64]) {
        if self == DType::F32 {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, data, DType::F64)
    }

    pub fn with_dtype(shape: &[usize], mut data: Vec<f64>, dtype: DType) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TallError::config(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TallError::shape("tensor", shape, &[data.len()]));
        }
        dtype.round_slice(&mut data);
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        let n = shape.iter().product();
        Tensor::with_dtype(shape, vec![0.0; n], dtype).expect("zero tensor")
    }

    pub fn filled(shape: &[usize], value: f64, dtype: DType) -> Self {
        let n = shape.iter().product();
        Tensor::with_dtype(shape, vec![value; n], dtype).expect("filled tensor")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(&[1], vec![value]).expect("scalar")
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn needs_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Overwrites one element, rounding to the tensor's precision.
    pub fn set(&mut self, index: usize, value: f64) {
        self.data[index] = self.dtype.round(value);
    }

    /// Applies `f` to every element in place, re-rounding afterwards.
    pub fn map_inplace(&mut self, mut f: impl FnMut(usize, f64) -> f64) {
        for (i, v) in self.data.iter_mut().enumerate() {
            *v = self.dtype.round(f(i, *v));
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TallError::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn to_dtype(&self, dtype: DType) -> Self {
        let mut data = self.data.clone();
        dtype.round_slice(&mut data);
        Tensor {
            shape: self.shape.clone(),
            dtype,
            data,
            requires_grad: self.requires_grad,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Row-major strides for `shape`.
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
    fn length_must_match_shape() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert_eq!(Tensor::new(&[2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn f32_storage_rounds() {
        let t = Tensor::with_dtype(&[1], vec![0.1], DType::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
        assert_ne!(t.data()[0], 0.1);
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
    }
}
