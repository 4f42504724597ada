use crate::error::{PkefError, Result};
use crate::math::dense::DenseMatrix;

/// Compressed-row sparse matrix. Columns within a row are strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets. Triplets may come in any
    /// order; duplicate coordinates are rejected.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return Err(PkefError::shape(
                    "SparseMatrix::from_triplets",
                    format!("entry ({r}, {c}) outside {rows}x{cols}"),
                ));
            }
        }
        sorted.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut data = Vec::with_capacity(sorted.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            if prev == Some((r, c)) {
                return Err(PkefError::shape(
                    "SparseMatrix::from_triplets",
                    format!("duplicate entry ({r}, {c})"),
                ));
            }
            prev = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c);
            data.push(v);
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(SparseMatrix {
            rows,
            cols,
            indptr,
            indices,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            data: vec![1.0; n],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        SparseMatrix {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn from_dense(m: &DenseMatrix) -> Self {
        let mut triplets = Vec::new();
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                let v = m.get(r, c);
                if v != 0.0 {
                    triplets.push((r, c, v));
                }
            }
        }
        Self::from_triplets(m.rows(), m.cols(), &triplets).expect("dense source is well formed")
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_iter(r) {
                out.set(r, c, v);
            }
        }
        out
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    /// `(col, value)` pairs of row `r`, in increasing column order.
    pub fn row_iter(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.data[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(pos) => self.data[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row_iter(r).map(|(_, v)| v).sum()
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row_iter(r) {
                triplets.push((c, r, v));
            }
        }
        SparseMatrix::from_triplets(self.cols, self.rows, &triplets)
            .expect("transpose of a valid matrix is valid")
    }
}

/// Sparse × dense product.
pub fn spmm(a: &SparseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != b.rows() {
        return Err(PkefError::Config(format!(
            "spmm dimension mismatch: sparse {}x{} times dense {:?}",
            a.rows(),
            a.cols(),
            b.shape()
        )));
    }
    let d = b.cols();
    let mut out = DenseMatrix::zeros(a.rows(), d);
    for r in 0..a.rows() {
        let orow = out.row_mut(r);
        for (c, v) in a.row_iter(r) {
            for (o, x) in orow.iter_mut().zip(b.row(c)) {
                *o += v * x;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · g`, used to push gradients back through [`spmm`].
pub fn spmm_transpose(a: &SparseMatrix, g: &DenseMatrix) -> DenseMatrix {
    debug_assert_eq!(a.rows(), g.rows());
    let d = g.cols();
    let mut out = DenseMatrix::zeros(a.cols(), d);
    for r in 0..a.rows() {
        let grow = g.row(r);
        for (c, v) in a.row_iter(r) {
            let orow = out.row_mut(c);
            for (o, x) in orow.iter_mut().zip(grow) {
                *o += v * x;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_product() {
        let a = SparseMatrix::from_dense(&DenseMatrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]));
        let b = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        let p = spmm(&a, &b).unwrap();
        assert_eq!(p, DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]));
    }

    #[test]
    fn identity_and_zero() {
        let b = DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![3.5, 4.0], vec![0.0, 7.0]]);
        assert_eq!(spmm(&SparseMatrix::identity(3), &b).unwrap(), b);
        assert_eq!(spmm(&SparseMatrix::zeros(3, 3), &b).unwrap(), DenseMatrix::zeros(3, 2));
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let err = spmm(&SparseMatrix::identity(2), &DenseMatrix::zeros(3, 1)).unwrap_err();
        assert!(matches!(err, PkefError::Config(_)));
    }

    #[test]
    fn duplicate_triplets_rejected() {
        assert!(SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (0, 1, 2.0)]).is_err());
        assert!(SparseMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn rows_iterate_in_column_order() {
        let a = SparseMatrix::from_triplets(2, 4, &[(0, 3, 1.0), (0, 0, 2.0), (1, 2, 3.0), (0, 1, 4.0)])
            .unwrap();
        let cols: Vec<usize> = a.row_iter(0).map(|(c, _)| c).collect();
        assert_eq!(cols, vec![0, 1, 3]);
        assert_eq!(a.get(1, 2), 3.0);
        assert_eq!(a.get(1, 1), 0.0);
        assert_eq!(a.transpose().get(2, 1), 3.0);
    }

    #[test]
    fn transpose_product_matches_dense() {
        let a = SparseMatrix::from_triplets(3, 2, &[(0, 0, 1.0), (1, 1, 2.0), (2, 0, -1.0)]).unwrap();
        let g = DenseMatrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let got = spmm_transpose(&a, &g);
        let want = a.to_dense().transpose().matmul(&g).unwrap();
        assert_eq!(got, want);
    }
}
