//! Compressed sparse column storage.

use crate::SparseError;

/// A sparse matrix in compressed sparse column form.
///
/// Row indices within a column are sorted and unique. Explicit zeros are
/// kept: several callers rely on a value-independent sparsity pattern so
/// that a symbolic factorization can be reused across parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Build from raw parts, validating the layout.
    pub fn from_parts(
        nrows: usize,
        ncols: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, SparseError> {
        if col_ptr.len() != ncols + 1 || col_ptr[0] != 0 {
            return Err(SparseError::InvalidLayout("column pointer length".into()));
        }
        if row_idx.len() != values.len() || *col_ptr.last().unwrap() != row_idx.len() {
            return Err(SparseError::InvalidLayout("index/value length".into()));
        }
        for j in 0..ncols {
            if col_ptr[j] > col_ptr[j + 1] {
                return Err(SparseError::InvalidLayout(
                    "column pointers decrease".into(),
                ));
            }
            let rows = &row_idx[col_ptr[j]..col_ptr[j + 1]];
            for w in rows.windows(2) {
                if w[0] >= w[1] {
                    return Err(SparseError::InvalidLayout(format!(
                        "rows of column {j} not strictly increasing"
                    )));
                }
            }
            if let Some(&r) = rows.last() {
                if r >= nrows {
                    return Err(SparseError::InvalidLayout(format!("row {r} out of bounds")));
                }
            }
        }
        Ok(Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Assemble from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, SparseError> {
        let mut counts = vec![0usize; ncols + 1];
        for &(r, c, _) in triplets {
            if r >= nrows || c >= ncols {
                return Err(SparseError::IndexOutOfBounds {
                    row: r,
                    col: c,
                    nrows,
                    ncols,
                });
            }
            counts[c + 1] += 1;
        }
        for j in 0..ncols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut tmp: Vec<(usize, f64)> = vec![(0, 0.0); triplets.len()];
        for &(r, c, v) in triplets {
            tmp[next[c]] = (r, v);
            next[c] += 1;
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        for j in 0..ncols {
            let seg = &mut tmp[counts[j]..counts[j + 1]];
            seg.sort_by_key(|&(r, _)| r);
            for &(r, v) in seg.iter() {
                if row_idx.len() > col_ptr[j] && *row_idx.last().unwrap() == r {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Ok(Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    /// Row-major dense input, keeping only nonzero entries.
    pub fn from_dense(nrows: usize, ncols: usize, dense: &[f64]) -> Self {
        assert_eq!(dense.len(), nrows * ncols);
        let mut trip = Vec::new();
        for i in 0..nrows {
            for j in 0..ncols {
                let v = dense[i * ncols + j];
                if v != 0.0 {
                    trip.push((i, j, v));
                }
            }
        }
        Self::from_triplets(nrows, ncols, &trip).expect("indices in range")
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Row indices and values of column `j`.
    pub fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.row_idx[r.clone()], &self.values[r])
    }

    /// Entry lookup by binary search; absent entries read as zero.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (rows, vals) = self.col(j);
        match rows.binary_search(&i) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |j| {
            let r = self.col_ptr[j]..self.col_ptr[j + 1];
            self.row_idx[r.clone()]
                .iter()
                .zip(&self.values[r])
                .map(move |(&i, &v)| (i, j, v))
        })
    }

    pub fn same_pattern(&self, other: &CscMatrix) -> bool {
        self.nrows == other.nrows
            && self.ncols == other.ncols
            && self.col_ptr == other.col_ptr
            && self.row_idx == other.row_idx
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols, "dimension mismatch in mul_vec");
        let mut y = vec![0.0; self.nrows];
        for j in 0..self.ncols {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                y[self.row_idx[k]] += self.values[k] * xj;
            }
        }
        y
    }

    /// y = Aᵀ x
    pub fn mul_transpose_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(
            x.len(),
            self.nrows,
            "dimension mismatch in mul_transpose_vec"
        );
        (0..self.ncols)
            .map(|j| {
                (self.col_ptr[j]..self.col_ptr[j + 1])
                    .map(|k| self.values[k] * x[self.row_idx[k]])
                    .sum()
            })
            .collect()
    }

    pub fn transpose(&self) -> CscMatrix {
        let mut counts = vec![0usize; self.nrows + 1];
        for &r in &self.row_idx {
            counts[r + 1] += 1;
        }
        for i in 0..self.nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut row_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for j in 0..self.ncols {
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                let r = self.row_idx[k];
                row_idx[next[r]] = j;
                values[next[r]] = self.values[k];
                next[r] += 1;
            }
        }
        CscMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            col_ptr: counts,
            row_idx,
            values,
        }
    }

    /// Multiply every stored value by `alpha`.
    pub fn scaled(&self, alpha: f64) -> CscMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// alpha·A + beta·B over the union pattern.
    pub fn add(&self, alpha: f64, other: &CscMatrix, beta: f64) -> Result<CscMatrix, SparseError> {
        if self.nrows != other.nrows || self.ncols != other.ncols {
            return Err(SparseError::DimensionMismatch {
                expected: (self.nrows, self.ncols),
                found: (other.nrows, other.ncols),
            });
        }
        let mut col_ptr = Vec::with_capacity(self.ncols + 1);
        let mut row_idx = Vec::with_capacity(self.nnz() + other.nnz());
        let mut values = Vec::with_capacity(self.nnz() + other.nnz());
        col_ptr.push(0);
        for j in 0..self.ncols {
            let (ra, va) = self.col(j);
            let (rb, vb) = other.col(j);
            let (mut p, mut q) = (0, 0);
            while p < ra.len() || q < rb.len() {
                if q == rb.len() || (p < ra.len() && ra[p] < rb[q]) {
                    row_idx.push(ra[p]);
                    values.push(alpha * va[p]);
                    p += 1;
                } else if p == ra.len() || rb[q] < ra[p] {
                    row_idx.push(rb[q]);
                    values.push(beta * vb[q]);
                    q += 1;
                } else {
                    row_idx.push(ra[p]);
                    values.push(alpha * va[p] + beta * vb[q]);
                    p += 1;
                    q += 1;
                }
            }
            col_ptr.push(row_idx.len());
        }
        Ok(CscMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Sparse product A·B.
    pub fn matmul(&self, other: &CscMatrix) -> Result<CscMatrix, SparseError> {
        if self.ncols != other.nrows {
            return Err(SparseError::DimensionMismatch {
                expected: (self.ncols, other.ncols),
                found: (other.nrows, other.ncols),
            });
        }
        let mut mark = vec![usize::MAX; self.nrows];
        let mut acc = vec![0.0; self.nrows];
        let mut col_ptr = vec![0];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        let mut rows_j: Vec<usize> = Vec::new();
        for j in 0..other.ncols {
            rows_j.clear();
            let (rb, vb) = other.col(j);
            for (&k, &bkj) in rb.iter().zip(vb) {
                let (ra, va) = self.col(k);
                for (&i, &aik) in ra.iter().zip(va) {
                    if mark[i] != j {
                        mark[i] = j;
                        acc[i] = 0.0;
                        rows_j.push(i);
                    }
                    acc[i] += aik * bkj;
                }
            }
            rows_j.sort_unstable();
            for &i in &rows_j {
                row_idx.push(i);
                values.push(acc[i]);
            }
            col_ptr.push(row_idx.len());
        }
        Ok(CscMatrix {
            nrows: self.nrows,
            ncols: other.ncols,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Kronecker product A ⊗ B.
    pub fn kron(&self, other: &CscMatrix) -> CscMatrix {
        let (m, n) = (other.nrows, other.ncols);
        let mut col_ptr = Vec::with_capacity(self.ncols * n + 1);
        let mut row_idx = Vec::with_capacity(self.nnz() * other.nnz());
        let mut values = Vec::with_capacity(self.nnz() * other.nnz());
        col_ptr.push(0);
        for ja in 0..self.ncols {
            let (ra, va) = self.col(ja);
            for jb in 0..n {
                let (rb, vb) = other.col(jb);
                for (&ia, &a) in ra.iter().zip(va) {
                    for (&ib, &b) in rb.iter().zip(vb) {
                        row_idx.push(ia * m + ib);
                        values.push(a * b);
                    }
                }
                col_ptr.push(row_idx.len());
            }
        }
        CscMatrix {
            nrows: self.nrows * m,
            ncols: self.ncols * n,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Place `self` into a larger zero matrix with its top-left corner at
    /// (`row_offset`, `col_offset`).
    pub fn embed(
        &self,
        nrows: usize,
        ncols: usize,
        row_offset: usize,
        col_offset: usize,
    ) -> CscMatrix {
        assert!(row_offset + self.nrows <= nrows && col_offset + self.ncols <= ncols);
        let mut col_ptr = vec![0; ncols + 1];
        for j in 0..self.ncols {
            col_ptr[col_offset + j + 1] = self.col_ptr[j + 1] - self.col_ptr[j];
        }
        for j in 0..ncols {
            col_ptr[j + 1] += col_ptr[j];
        }
        let row_idx = self.row_idx.iter().map(|&r| r + row_offset).collect();
        CscMatrix {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values: self.values.clone(),
        }
    }

    /// Largest |A_ij − A_ji| over stored entries of a square matrix.
    pub fn asymmetry(&self) -> f64 {
        if self.nrows != self.ncols {
            return f64::INFINITY;
        }
        self.iter()
            .map(|(i, j, v)| (v - self.get(j, i)).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.asymmetry() <= tol
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols))
            .map(|i| self.get(i, i))
            .collect()
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.nrows * self.ncols];
        for (i, j, v) in self.iter() {
            d[i * self.ncols + j] += v;
        }
        d
    }

    /// Row sums.
    pub fn row_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.nrows];
        for (i, _, v) in self.iter() {
            s[i] += v;
        }
        s
    }

    /// Symmetric permutation P A Pᵀ where `perm[new] = old`.
    pub fn permute_symmetric(&self, perm: &[usize]) -> CscMatrix {
        let n = self.ncols;
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let trip: Vec<_> = self.iter().map(|(i, j, v)| (inv[i], inv[j], v)).collect();
        CscMatrix::from_triplets(n, n, &trip).expect("permutation in range")
    }
}
