//! Dense `f64` tensors and the numeric kernels every layer is built from.
//!
//! Tensors are contiguous and row-major. There are no views or broadcasting;
//! every kernel takes its operands by reference and returns a fresh tensor.

mod conv;
mod linalg;
mod stats;

pub use conv::{
    conv2d, conv2d_backward, conv2d_backward_input, conv2d_backward_kernels, conv2d_trimmed, conv_output_extent,
    upsample2x, upsample2x_adjoint, upsample_conv2d, upsample_conv2d_backward_input, upsample_conv2d_backward_kernels,
    upsample_conv_supported,
};
pub use linalg::{matmul, matmul_nt, matmul_tn};
pub use stats::batch_stats;

pub(crate) use linalg::gemm;
pub(crate) use stats::channel_stats;

use crate::error::{Error, Result};

/// Ordered list of positive extents.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::dim("shape must have at least one extent"));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(Error::dim(format!("extent {i} of {dims:?} is zero")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::dim(format!("element count of {dims:?} overflows")))?;
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite entries.
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::dim(format!(
                "shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.ensure_finite("tensor construction")?;
        Ok(t)
    }

    /// Internal constructor for kernels whose output length is correct by
    /// construction. Finiteness is still the caller's responsibility.
    pub(crate) fn from_parts(dims: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor {
            shape: Shape(dims.to_vec()),
            data,
        }
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if !value.is_finite() {
            return Err(Error::Numeric {
                context: "fill value".into(),
            });
        }
        let n = shape.numel();
        Ok(Tensor {
            shape,
            data: vec![value; n],
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the buffer. Writers must keep every entry finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {} into {shape}", self.shape)));
        }
        Ok(Tensor { shape, data: self.data })
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let out = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        };
        out.ensure_finite("map")?;
        Ok(out)
    }

    /// `alpha * self + beta * other`.
    pub fn axpby(&self, alpha: f64, other: &Tensor, beta: f64) -> Result<Tensor> {
        self.expect_same_shape(other, "axpby")?;
        let out = Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
        };
        out.ensure_finite("axpby")?;
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rows `start..end` along the leading (batch) axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        let b = self.dims()[0];
        if start >= end || end > b {
            return Err(Error::dim(format!(
                "batch slice {start}..{end} out of range for batch {b}"
            )));
        }
        let per = self.numel() / b;
        let mut dims = self.dims().to_vec();
        dims[0] = end - start;
        Ok(Tensor::from_parts(&dims, self.data[start * per..end * per].to_vec()))
    }

    /// Stacks tensors of identical shape along the leading axis.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let inner = &first.dims()[1..];
        let mut total = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.dims()[1..] != inner {
                return Err(Error::dim(format!(
                    "concat: {} does not match {}",
                    p.shape, first.shape
                )));
            }
            total += p.dims()[0];
            data.extend_from_slice(&p.data);
        }
        let mut dims = first.dims().to_vec();
        dims[0] = total;
        Ok(Tensor::from_parts(&dims, data))
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric {
                context: context.to_string(),
            })
        }
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{op}: shape {} does not match {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, rank: usize, op: &str) -> Result<()> {
        if self.shape.rank() != rank {
            return Err(Error::dim(format!(
                "{op}: expected a rank-{rank} tensor, got {}",
                self.shape
            )));
        }
        Ok(())
    }
}
