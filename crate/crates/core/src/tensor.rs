//! Dense row-major `f32` tensors.
//!
//! Storage is single precision; every reduction (dot products, sums, softmax
//! normalizers) accumulates in `f64` before rounding back.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that every extent is positive and that the
    /// data length matches their product. A rank-0 tensor holds one scalar.
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let dims = dims.into();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: f32) -> Self {
        let dims = dims.into();
        assert!(dims.iter().all(|&d| d > 0), "zero extent in {dims:?}");
        let n = dims.iter().product();
        Self { dims, data: vec![value; n] }
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let dims = dims.into();
        assert!(dims.iter().all(|&d| d > 0), "zero extent in {dims:?}");
        let n: usize = dims.iter().product();
        Self { dims, data: (0..n).map(&mut f).collect() }
    }

    pub fn scalar(value: f32) -> Self {
        Self { dims: Vec::new(), data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.dims.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.dims);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rejects NaN/Inf. Operation boundaries call this in debug builds only.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.dims[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::shape(op, format!("expected a matrix, got {:?}", self.dims))),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, p) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", self.dims, other.dims),
            ));
        }
        let mut acc = vec![0.0f64; m * p];
        for i in 0..m {
            let row = &mut acc[i * p..(i + 1) * p];
            for kk in 0..k {
                let a = self.data[i * k + kk] as f64;
                if a == 0.0 {
                    continue;
                }
                for (r, &b) in row.iter_mut().zip(&other.data[kk * p..(kk + 1) * p]) {
                    *r += a * b as f64;
                }
            }
        }
        let out = Tensor { dims: vec![m, p], data: acc.into_iter().map(|v| v as f32).collect() };
        if cfg!(debug_assertions) {
            out.check_finite("matmul")?;
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        Ok(Tensor::from_fn([n, m], |i| self.data[(i % m) * n + i / m]))
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { dims: self.dims.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|v| v * factor).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape("dot", format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a as f64 * b as f64).sum())
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.data.iter().map(|&v| v as f64 * v as f64).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::shape("max_abs_diff", format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| math::abs(a as f64 - b as f64))
            .fold(0.0, f64::max))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} for rank {}", self.rank())));
        }
        let values: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        let out = softmax_f64(&values, &self.dims, axis);
        let out = Tensor { dims: self.dims.clone(), data: out.into_iter().map(|v| v as f32).collect() };
        if cfg!(debug_assertions) {
            out.check_finite("softmax")?;
        }
        Ok(out)
    }
}

/// Splits `dims` around `axis` into (outer, axis extent, inner) strides.
pub(crate) fn axis_layout(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let len = dims[axis];
    let inner = dims[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn softmax_f64(values: &[f64], dims: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_layout(dims, axis);
    let mut out = vec![0.0; values.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| values[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = math::exp(values[idx(k)] - max);
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
    }
    out
}
