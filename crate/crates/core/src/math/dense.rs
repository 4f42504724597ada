use std::fmt;

use crate::error::{PkefError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "{:?}", self.row(r))?;
        }
        if self.rows > 8 {
            write!(f, " ...")?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(PkefError::shape(
                "DenseMatrix::from_vec",
                format!("{} values for {}x{}", values.len(), rows, cols),
            ));
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            values.extend_from_slice(r);
        }
        DenseMatrix {
            rows: rows.len(),
            cols,
            values,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        DenseMatrix {
            rows: 1,
            cols: values.len(),
            values: values.to_vec(),
        }
    }

    pub fn column_vector(values: &[f64]) -> Self {
        DenseMatrix {
            rows: values.len(),
            cols: 1,
            values: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.values[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &DenseMatrix) -> bool {
        self.shape() == other.shape()
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &DenseMatrix) -> DenseMatrix {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> DenseMatrix {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
        assert!(
            self.same_shape(other),
            "shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &DenseMatrix) {
        assert!(self.same_shape(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    /// In-place `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &DenseMatrix) {
        assert!(self.same_shape(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert!(self.same_shape(other));
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// `self · otherᵀ`, i.e. `(n×m)·(p×m)ᵀ → n×p`.
    pub fn matmul_t(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.cols {
            return Err(PkefError::shape(
                "matmul_t",
                format!("{:?} · {:?}ᵀ", self.shape(), other.shape()),
            ));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.values[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// Standard product `(n×m)·(m×p) → n×p`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(PkefError::shape(
                "matmul",
                format!("{:?} · {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let orow = out.row_mut(i);
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Gathers the listed rows into a new matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// Contiguous row block `[start, start + len)`.
    pub fn row_block(&self, start: usize, len: usize) -> DenseMatrix {
        DenseMatrix {
            rows: len,
            cols: self.cols,
            values: self.values[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Stacks `top` over `bottom`.
    pub fn vstack(top: &DenseMatrix, bottom: &DenseMatrix) -> Result<DenseMatrix> {
        if top.cols != bottom.cols {
            return Err(PkefError::shape(
                "vstack",
                format!("{:?} over {:?}", top.shape(), bottom.shape()),
            ));
        }
        let mut values = top.values.clone();
        values.extend_from_slice(&bottom.values);
        Ok(DenseMatrix {
            rows: top.rows + bottom.rows,
            cols: top.cols,
            values,
        })
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
