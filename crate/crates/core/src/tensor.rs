//! Dense row-major `f64` tensors.
//!
//! Elementwise binary operations accept operands of identical shape, or one
//! operand holding a single element (a scalar) which is broadcast. Nothing
//! else broadcasts; per-feature scaling and bias addition go through the
//! explicit row-vector operations [`Tensor::mul_row`] and [`Tensor::add_row`].

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("positive dimensions")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::NonScalarLoss(self.shape.clone()))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Width of the trailing axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidArgument(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        if other.is_scalar() {
            let b = other.data[0];
            return Ok(self.map(|a| f(a, b)));
        }
        if self.is_scalar() {
            let a = self.data[0];
            return Ok(other.map(|b| f(a, b)));
        }
        Err(Error::ShapeMismatch {
            op,
            left: self.shape.clone(),
            right: other.shape.clone(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn add_scalar(&self, offset: f64) -> Tensor {
        self.map(|v| v + offset)
    }

    pub fn square(&self) -> Tensor {
        self.map(|v| v * v)
    }

    pub fn abs(&self) -> Tensor {
        self.map(f64::abs)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(v) = self.data.iter().find(|v| **v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative argument {v}"),
            });
        }
        Ok(self.map(f64::sqrt))
    }

    pub fn ln(&self) -> Result<Tensor> {
        if let Some(v) = self.data.iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {v}"),
            });
        }
        Ok(self.map(f64::ln))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Multiplies every row (trailing-axis slice) elementwise by `row`.
    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        self.row_op(row, "mul_row", |a, b| a * b)
    }

    /// Adds `row` to every row (trailing-axis slice).
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        self.row_op(row, "add_row", |a, b| a + b)
    }

    fn row_op(&self, row: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let width = self.last_dim();
        if row.shape.len() != 1 || row.len() != width {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: row.shape.clone(),
            });
        }
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(width) {
            for (v, &r) in chunk.iter_mut().zip(&row.data) {
                *v = f(*v, r);
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Sums over all rows, leaving a vector of the trailing width.
    pub fn sum_rows(&self) -> Tensor {
        let width = self.last_dim();
        let mut out = vec![0.0; width];
        for chunk in self.data.chunks(width) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Tensor::vector(out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: self.shape.clone(),
            right: other.shape.clone(),
        };
        let (m, k) = self.dims2().map_err(|_| mismatch())?;
        let (k2, n) = other.dims2().map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        for (a_row, o_row) in self.data.chunks(k).zip(out.chunks_mut(n)) {
            for (&a, b_row) in a_row.iter().zip(other.data.chunks(n)) {
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    /// Column `j` of a matrix.
    pub fn column(&self, j: usize) -> Result<Vec<f64>> {
        let (_, c) = self.dims2()?;
        if j >= c {
            return Err(Error::InvalidArgument(format!("column {j} out of range {c}")));
        }
        Ok(self.data.iter().skip(j).step_by(c).copied().collect())
    }

    /// Keeps only the listed columns of a matrix, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if cols.iter().any(|&j| j >= c) || cols.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "column selection {cols:?} invalid for {c} columns"
            )));
        }
        let mut out = Vec::with_capacity(r * cols.len());
        for row in self.data.chunks(c) {
            out.extend(cols.iter().map(|&j| row[j]));
        }
        Tensor::new(&[r, cols.len()], out)
    }

    /// Keeps only the listed rows of a matrix, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if rows.iter().any(|&i| i >= r) || rows.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "row selection {rows:?} invalid for {r} rows"
            )));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor::new(&[rows.len(), c], out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
