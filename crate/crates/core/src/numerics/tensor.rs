//! Dense row-major tensors over `f32`/`f64` with the arithmetic the
//! networks in this crate need. Everything is plain safe Rust; shapes are
//! validated at the operation boundary and violations surface as
//! [`Error::Shape`].

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type tag, used in checkpoint manifests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Floating-point element of a [`Tensor`].
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn to_f64_val(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64_val(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64_val(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// One-hot vector of length `classes` with a 1 at `class_idx`.
    pub fn one_hot(classes: usize, class_idx: usize) -> Self {
        let mut t = Tensor::zeros(&[classes]);
        t.data[class_idx] = T::one();
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Number of rows, treating the tensor as a 2-d matrix.
    pub fn rows(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [r, _] => Ok(*r),
            other => Err(Error::shape(format!("expected a matrix, got {other:?}"))),
        }
    }

    pub fn cols(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [_, c] => Ok(*c),
            other => Err(Error::shape(format!("expected a matrix, got {other:?}"))),
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> T {
        let cols = self.shape[self.shape.len() - 1];
        self.data[r * cols + c]
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elems) into {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x.to_f64_val()).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64_val())).collect(),
        }
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "mul")?;
        Ok(self.zip(other, |a, b| a * b))
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "div")?;
        Ok(self.zip(other, |a, b| a / b))
    }

    fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn neg(&self) -> Self {
        self.map(|x| -x)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &x| if x.abs() > acc { x.abs() } else { acc })
    }

    /// Index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.data.iter().enumerate() {
            if x > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Euclidean distance between two same-shaped tensors.
    pub fn l2_distance(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "l2_distance")?;
        let s = self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        Ok(s.sqrt())
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = (self.rows()?, self.cols()?);
        let (k2, n) = (other.rows()?, other.cols()?);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        // ikj order so the inner loop walks both operands contiguously.
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = (self.rows()?, self.cols()?);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Row-wise softmax over the last dimension of a matrix (a 1-d tensor is
    /// treated as a single row). Stable under large logits via max shifting.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (rows, cols) = self.as_rows()?;
        let mut out = self.data.clone();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                sum = sum + *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn log_softmax_rows(&self) -> Result<Self> {
        let (rows, cols) = self.as_rows()?;
        let mut out = self.data.clone();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row
                .iter()
                .fold(T::zero(), |acc, &x| acc + (x - mx).exp())
                .ln()
                + mx;
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Row-wise normalization to zero mean and unit variance (population
    /// variance, `eps` inside the square root). No affine transform.
    pub fn layer_norm_rows(&self, eps: f64) -> Result<Self> {
        let (rows, cols) = self.as_rows()?;
        let n = T::from_f64(cols as f64);
        let eps = T::from_f64(eps);
        let mut out = self.data.clone();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) / n;
            let var = row
                .iter()
                .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
                / n;
            let inv = (var + eps).sqrt().recip();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu_scalar)
    }

    pub fn softplus(&self) -> Self {
        self.map(softplus_scalar)
    }

    /// View an n-d tensor as rows over its last dimension.
    pub fn as_rows(&self) -> Result<(usize, usize)> {
        if self.shape.is_empty() {
            return Err(Error::shape("empty shape".to_string()));
        }
        let cols = self.shape[self.shape.len() - 1];
        Ok((self.data.len() / cols, cols))
    }

    /// Concatenate along the first axis. All parts must agree on trailing dims.
    pub fn concat_rows(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors".to_string()))?;
        let trailing = &first.shape[1..];
        let mut rows = 0;
        for p in parts {
            if &p.shape[1..] != trailing {
                return Err(Error::shape(format!(
                    "concat_rows trailing dims differ: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            rows += p.shape[0];
        }
        let mut data = Vec::with_capacity(rows * numel(trailing).max(1));
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(trailing);
        Ok(Tensor { shape, data })
    }

    /// Concatenate matrices along the column axis.
    pub fn concat_cols(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors".to_string()))?;
        let rows = first.rows()?;
        let mut cols = 0;
        for p in parts {
            if p.rows()? != rows {
                return Err(Error::shape(format!(
                    "concat_cols row counts differ: {} vs {}",
                    rows,
                    p.rows()?
                )));
            }
            cols += p.cols()?;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let c = p.cols()?;
                data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (rows, cols) = (self.rows()?, self.cols()?);
        if start + len > rows {
            return Err(Error::shape(format!(
                "slice_rows {start}..{} out of {rows}",
                start + len
            )));
        }
        Ok(Tensor {
            shape: vec![len, cols],
            data: self.data[start * cols..(start + len) * cols].to_vec(),
        })
    }

    /// A single row of a matrix as a 1-d tensor.
    pub fn row(&self, r: usize) -> Result<Self> {
        let cols = self.cols()?;
        let sliced = self.slice_rows(r, 1)?;
        Ok(Tensor {
            shape: vec![cols],
            data: sliced.data,
        })
    }
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

pub(crate) fn softplus_scalar<T: Scalar>(x: T) -> T {
    // log(1 + exp(x)) without overflow for large x.
    if x > T::from_f64(30.0) {
        x
    } else {
        (T::one() + x.exp()).ln()
    }
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Percentile with linear interpolation between order statistics
/// (index `h = (n - 1) * p / 100`). `p` must lie in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::numeric("percentile of empty slice"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::numeric(format!("percentile p={p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in percentile"));
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        Ok(sorted[lo])
    } else {
        let frac = h - lo as f64;
        Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::from_vec(vec![2, 1], vec![3.0, -4.5]).unwrap();
        assert_eq!(eye.matmul(&v).unwrap(), v);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = RngStream::new(11, 0);
        let a = Tensor::<f64>::gaussian(&mut rng, &[3, 4]);
        let b = Tensor::<f64>::gaussian(&mut rng, &[4, 2]);
        let got = a.matmul(&b).unwrap();
        // independent triple-loop recomputation
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.get2(i, p) * b.get2(p, j);
                }
                assert!((got.get2(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_dimension_error() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_vec(vec![2, 3], vec![1.0f64, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let s = t.softmax_rows().unwrap();
        for r in 0..2 {
            let sum: f64 = (0..3).map(|c| s.get2(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_invariant_under_logit_shift() {
        let t = Tensor::from_vec(vec![1, 4], vec![0.3f64, -1.2, 2.0, 0.0]).unwrap();
        let shifted = t.map(|x| x + 7.5);
        let a = t.softmax_rows().unwrap();
        let b = shifted.softmax_rows().unwrap();
        assert_eq!(a.argmax(), b.argmax());
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_has_zero_mean_unit_variance() {
        let mut rng = RngStream::new(3, 9);
        let t = Tensor::<f64>::gaussian(&mut rng, &[4, 16]);
        let n = t.layer_norm_rows(1e-6).unwrap();
        for r in 0..4 {
            let row: Vec<f64> = (0..16).map(|c| n.get2(r, c)).collect();
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn percentile_singleton_and_linear_interp() {
        assert_eq!(percentile(&[4.25], 0.0).unwrap(), 4.25);
        assert_eq!(percentile(&[4.25], 63.0).unwrap(), 4.25);
        assert_eq!(percentile(&[4.25], 100.0).unwrap(), 4.25);
        let vals: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let width = percentile(&vals, 97.5).unwrap() - percentile(&vals, 2.5).unwrap();
        assert!((width - 95.0).abs() < 1e-12);
    }

    #[test]
    fn percentile_monotone_in_p() {
        let vals = vec![0.4, -2.0, 7.7, 1.0, 1.0, 3.2];
        let mut last = f64::NEG_INFINITY;
        for p in 0..=20 {
            let q = percentile(&vals, p as f64 * 5.0).unwrap();
            assert!(q >= last);
            last = q;
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = Tensor::from_vec(vec![1, 2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let cat = Tensor::concat_rows(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[3, 2]);
        assert_eq!(cat.slice_rows(0, 1).unwrap(), a);
        assert_eq!(cat.slice_rows(1, 2).unwrap(), b);
    }
}
