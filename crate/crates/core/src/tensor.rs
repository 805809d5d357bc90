//! Dense row-major tensors and the handful of kernels the model needs.
//!
//! Every reduction accumulates left to right over the row-major index so
//! results are bit-reproducible for a given input.

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Floating-point element type of a tensor.
pub trait Scalar: Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` must hold exactly `DTYPE.size_of()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() && data.len() == 1 {
            return Ok(Self { shape, data });
        }
        if shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidTensor(format!("shape {shape:?} overflows")))?;
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidTensor("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidTensor(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::DTYPE.size_of());
        for &x in &self.data {
            x.write_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let size = T::DTYPE.size_of();
        if !bytes.len().is_multiple_of(size) {
            return Err(Error::Malformed(format!(
                "{} bytes is not a multiple of {size}",
                bytes.len()
            )));
        }
        let data = bytes.chunks_exact(size).map(T::read_le).collect();
        Self::new(shape, data)
    }

    /// Elementwise `self += other`, same shape required.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err("add", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`, i.e. row-by-row dot products.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(shape_err("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out.push(dot(arow, b.row(j)));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (m2, n) = b.dims2()?;
    if m != m2 {
        return Err(shape_err("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = b.row(i);
        for p in 0..k {
            let av = a.data[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Mean softmax cross-entropy over rows of `logits` and the gradient of that
/// mean with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(shape_err("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    let mut total = T::zero();
    let mut grad = vec![T::zero(); b * c];
    let inv_b = T::one() / T::from_f64(b as f64);
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::LabelOutOfRange {
                example: i,
                label: label as u32,
                n_classes: c,
            });
        }
        let row = logits.row(i);
        let (argmax, max) = row
            .iter()
            .enumerate()
            .fold((0, row[0]), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) });
        // log-sum-exp as ln(1 + Σ_{j≠argmax} e^{x_j - max}) for accuracy near zero loss
        let rest = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != argmax)
            .fold(T::zero(), |acc, (_, &v)| acc + (v - max).exp());
        let lse = rest.ln_1p();
        total = total + (lse - (row[label] - max));
        let denom = T::one() + rest;
        let g = &mut grad[i * c..(i + 1) * c];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = if j == argmax {
                T::one() / denom
            } else {
                (row[j] - max).exp() / denom
            };
            let y = if j == label { T::one() } else { T::zero() };
            *gj = (p - y) * inv_b;
        }
    }
    Ok((total * inv_b, Tensor::new(vec![b, c], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn shape_product_enforced() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let i = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(matmul(&a, &i).unwrap(), a);
    }

    #[test]
    fn matmul_dot_product() {
        let a = m(&[&[1.0, 2.0, 3.0]]);
        let b = m(&[&[4.0], &[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[32.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = m(&[&[1.0, -2.0, 0.5], &[0.25, 3.0, -1.0]]);
        let b = m(&[&[2.0, 1.0], &[0.0, -1.0], &[4.0, 0.5]]);
        let bt = m(&[&[2.0, 0.0, 4.0], &[1.0, -1.0, 0.5]]);
        let at = m(&[&[1.0, 0.25], &[-2.0, 3.0], &[0.5, -1.0]]);
        let ab = matmul(&a, &b).unwrap();
        assert_eq!(matmul_nt(&a, &bt).unwrap(), ab);
        assert_eq!(matmul_tn(&at, &b).unwrap(), ab);
    }

    #[test]
    fn matmul_inner_mismatch_names_both_shapes() {
        let a = m(&[&[1.0, 2.0]]);
        let b = m(&[&[1.0, 2.0]]);
        match matmul(&a, &b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![1, 2]);
                assert_eq!(rhs, vec![1, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_values() {
        let (l, _) = softmax_cross_entropy(&m(&[&[0.3, 0.3, 0.3]]), &[1]).unwrap();
        assert!((l - 3f64.ln()).abs() <= f64::EPSILON * 3f64.ln());
        let (l, _) = softmax_cross_entropy(&m(&[&[1.0, 2.0, 3.0]]), &[2]).unwrap();
        assert!((l - 0.407_605_964_444_380_9).abs() < 1e-12);
        let (l, _) = softmax_cross_entropy(&m(&[&[20.0, 0.0, 0.0]]), &[0]).unwrap();
        assert!(l < 1e-8 && l > 0.0);
        assert!(softmax_cross_entropy(&m(&[&[1.0, 2.0]]), &[2]).is_err());
    }

    #[test]
    fn le_bytes_roundtrip() {
        let t = Tensor::<f32>::new(vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25]).unwrap();
        let back = Tensor::<f32>::from_le_bytes(vec![2, 2], &t.to_le_bytes()).unwrap();
        assert_eq!(t.to_le_bytes(), back.to_le_bytes());
    }
}
