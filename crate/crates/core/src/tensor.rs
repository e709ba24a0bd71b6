//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a plain value: extents plus contiguous data. Gradient
//! buffers and the `requires_grad` flag live on the nodes of an
//! [`autodiff::Graph`](crate::autodiff::Graph), which owns a tensor once it
//! has been recorded.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.dims, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.dims, self.data.len())
        }
    }
}

pub(crate) fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {dims:?}")));
        }
        if numel(dims) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {} values, got {}", numel(dims), data.len()),
            ));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "zero extent in {dims:?}");
        Self {
            dims: dims.to_vec(),
            data: vec![value; numel(dims)],
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel(dims)).map(f).collect();
        Self::new(dims, data).expect("from_fn dims")
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value at a multi-index. Panics when out of range.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.dims.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            assert!(i < d, "index {index:?} out of range for {:?}", self.dims);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!(
                "expected a single element, tensor has dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        if numel(dims) != self.data.len() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {dims:?}", self.dims),
            ));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_dims("zip_map", other)?;
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; infinite if dims differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.dims != other.dims {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn expect_same_dims(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Ok(())
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix("matmul")?;
        let (k2, n) = other.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.dims, other.dims),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            kernels::MatRef::row_major(&self.data, m, k),
            kernels::MatRef::row_major(&other.data, k, n),
            &mut out,
            kernels::OutLayout::row_major(m, n),
            1.0,
            0.0,
        );
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.as_matrix("transpose")?;
        Ok(Tensor::from_fn(&[n, m], |i| self.data[(i % m) * n + i / m]))
    }

    /// Bilinear resize of the two trailing (spatial) axes with half-pixel
    /// centre alignment.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        if self.rank() < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::shape(
                "resize_bilinear",
                format!("{:?} -> {out_h}x{out_w}", self.dims),
            ));
        }
        let r = self.rank();
        let (h, w) = (self.dims[r - 2], self.dims[r - 1]);
        let planes = self.numel() / (h * w);
        let plan = kernels::BilinearPlan::new(h, w, out_h, out_w);
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            plan.forward(
                &self.data[p * h * w..(p + 1) * h * w],
                &mut out[p * out_h * out_w..(p + 1) * out_h * out_w],
            );
        }
        let mut dims = self.dims.clone();
        dims[r - 2] = out_h;
        dims[r - 1] = out_w;
        Tensor::new(&dims, out)
    }

    pub(crate) fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            &[m, n] => Ok((m, n)),
            _ => Err(Error::shape(
                op,
                format!("expected a matrix, got dims {:?}", self.dims),
            )),
        }
    }
}
