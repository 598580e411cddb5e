//! Dense row-major tensors.
//!
//! Everything in the model is expressed over [`Tensor`]: word embeddings,
//! object region features, parameters and every intermediate value in the
//! computation graph. Most operations are two-dimensional (`rows x cols`);
//! vectors are carried as `1 x n` rows.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if shape.is_empty() || expected != data.len() {
            return Err(Error::Validation(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// A `1 x n` row vector.
    pub fn row(values: Vec<T>) -> Self {
        Tensor { shape: vec![1, values.len()], data: values }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension; `1` for a rank-1 tensor.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 1 {
            self.shape[0]
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Checks the invariants of a stored feature tensor: positive dims, finite values.
    pub fn validate_feature(&self) -> Result<()> {
        if self.shape.is_empty() || self.shape.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!("feature tensor has empty dimension: {:?}", self.shape)));
        }
        if self.shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Validation("shape/data length mismatch".into()));
        }
        if !self.is_finite() {
            return Err(Error::Validation("feature tensor contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out }
    }

    /// Mean over rows: `[n x d] -> [1 x d]`.
    pub fn mean_rows(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.row_slice(i)) {
                *o = *o + *v;
            }
        }
        let n = T::from_usize(r).unwrap();
        out.iter_mut().for_each(|v| *v = *v / n);
        Tensor::row(out)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64_lossy()).unwrap()).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }
}

/// Anything that owns a collection of named trainable tensors.
pub trait ParameterSet<T: Scalar> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param(&mut |n, _| names.push(n.to_string()));
        names
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.numel());
        n
    }
}

/// An ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedParams<T: Scalar> {
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> NamedParams<T> {
    pub fn new() -> Self {
        NamedParams { entries: Vec::new() }
    }

    pub fn with(mut self, name: &str, t: Tensor<T>) -> Self {
        self.entries.push((name.to_string(), t));
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

impl<T: Scalar> ParameterSet<T> for NamedParams<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (n, t) in &self.entries {
            f(n, t);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (n, t) in &mut self.entries {
            f(n, t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.row_slice(1), &[3.0, 4.0, 5.0]);
        assert_eq!(t.at(0, 2), 2.0);
    }

    #[test]
    fn empty_dims_fail_feature_validation() {
        let t = Tensor::<f32>::new(vec![0, 5], vec![]).unwrap();
        assert!(t.validate_feature().is_err());
        let nan = Tensor::<f32>::row(vec![f32::NAN]);
        assert!(nan.validate_feature().is_err());
    }

    #[test]
    fn transpose_and_mean() {
        let t = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(t.transpose().data(), &[1.0, 3.0, 2.0, 6.0]);
        assert_eq!(t.mean_rows().data(), &[2.0, 4.0]);
    }
}
