//! Dense row-major tensors over a [`Scalar`] storage type.
//!
//! Construction validates the shape/data length agreement and rejects
//! non-finite values, so downstream numeric code can assume finite inputs.
//! Matrix products accumulate in `f64` whatever the storage width.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    /// Build a tensor, checking that `data.len()` matches the shape product
    /// and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.is_empty() {
            return Err(CoreError::EmptyInput);
        }
        if expected != data.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite);
        }
        Ok(Self { shape, data })
    }

    /// 1-D tensor from a value list.
    pub fn vector(data: Vec<F>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// 2-D tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); n.max(1)],
        }
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Number of rows when interpreted as a matrix.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns when interpreted as a matrix.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Borrow row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Size of the given axis.
    pub fn axis_len(&self, axis: usize) -> Result<usize> {
        self.shape
            .get(axis)
            .copied()
            .ok_or_else(|| CoreError::InvalidArgument(format!("axis {axis} out of range")))
    }

    /// Copy out the values of channel `index` along `axis`.
    pub fn channel_values(&self, axis: usize, index: usize) -> Result<Vec<F>> {
        let mut out = Vec::with_capacity(self.len() / self.axis_len(axis)?);
        self.for_each_channel_offset(axis, index, |off| out.push(self.data[off]))?;
        Ok(out)
    }

    /// Visit the flat offsets belonging to channel `index` along `axis`, in
    /// row-major order.
    pub fn for_each_channel_offset(
        &self,
        axis: usize,
        index: usize,
        mut f: impl FnMut(usize),
    ) -> Result<()> {
        let axis_len = self.axis_len(axis)?;
        if index >= axis_len {
            return Err(CoreError::InvalidArgument(format!(
                "channel {index} out of range for axis of size {axis_len}"
            )));
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        for o in 0..outer {
            let base = o * axis_len * inner + index * inner;
            for i in 0..inner {
                f(base + i);
            }
        }
        Ok(())
    }

    /// Elementwise map preserving the shape.
    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Transpose a 2-D tensor.
    pub fn transposed(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(CoreError::InvalidArgument(
                "transpose requires a 2-D tensor".into(),
            ));
        }
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }

    /// `self · otherᵀ` for 2-D tensors of shapes (m×k) and (n×k).
    ///
    /// This is the layer-output orientation `Y = X Wᵀ`; dot products are
    /// accumulated in `f64`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(CoreError::InvalidArgument(
                "matmul_nt requires 2-D tensors".into(),
            ));
        }
        if self.cols() != other.cols() {
            return Err(CoreError::ShapeMismatch(format!(
                "inner dimensions differ: {} vs {}",
                self.cols(),
                other.cols()
            )));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.rows());
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                let b = other.row(j);
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += a[p].to_f64_lossy() * b[p].to_f64_lossy();
                }
                data[i * n + j] = F::from_f64_lossy(acc);
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data,
        })
    }

    /// Plain `self · other` for 2-D tensors of shapes (m×k) and (k×n).
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(CoreError::InvalidArgument(
                "matmul requires 2-D tensors".into(),
            ));
        }
        if self.cols() != other.rows() {
            return Err(CoreError::ShapeMismatch(format!(
                "inner dimensions differ: {} vs {}",
                self.cols(),
                other.rows()
            )));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += self.data[i * k + p].to_f64_lossy() * other.data[p * n + j].to_f64_lossy();
                }
                data[i * n + j] = F::from_f64_lossy(acc);
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data,
        })
    }

    /// Squared Frobenius norm, accumulated in `f64`.
    pub fn frob_sq(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64_lossy();
                x * x
            })
            .sum()
    }

    /// Squared Frobenius norm of `self - other`.
    pub fn dist_sq(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = a.to_f64_lossy() - b.to_f64_lossy();
                d * d
            })
            .sum())
    }

    /// Convert storage width.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}
