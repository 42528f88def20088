//! Compressed sparse row matrices, sparse-dense products and dominant eigenvalue estimation.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Tolerance of the symmetry check performed by [`power_iteration_lmax`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Canonical CSR matrix: column indices strictly increasing within each row,
/// no explicit zeros, every value finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix<T> {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<T>,
}

/// Builds a canonical CSR matrix from coordinate triples.
///
/// Duplicate coordinates are summed and entries that end up exactly zero are dropped.
pub fn csr_from_coo<T: Scalar>(
    n_rows: usize,
    n_cols: usize,
    triples: &[(usize, usize, T)],
) -> Result<SparseMatrix<T>> {
    for &(row, col, v) in triples {
        if row >= n_rows || col >= n_cols {
            return Err(Error::IndexOutOfRange {
                row,
                col,
                n_rows,
                n_cols,
            });
        }
        if !v.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
    }
    // Stable sort keeps the input order of duplicates so the summation order is fixed.
    let mut sorted: Vec<(usize, usize, T)> = triples.to_vec();
    sorted.sort_by_key(|&(r, c, _)| (r, c));

    let mut row_offsets = vec![0usize; n_rows + 1];
    let mut col_indices = Vec::with_capacity(sorted.len());
    let mut values = Vec::with_capacity(sorted.len());
    let mut idx = 0;
    while idx < sorted.len() {
        let (r, c, mut v) = sorted[idx];
        idx += 1;
        while idx < sorted.len() && sorted[idx].0 == r && sorted[idx].1 == c {
            v = v + sorted[idx].2;
            idx += 1;
        }
        if !v.is_finite() {
            return Err(Error::NonFinite { row: r, col: c });
        }
        if v != T::zero() {
            col_indices.push(c);
            values.push(v);
            row_offsets[r + 1] += 1;
        }
    }
    for r in 0..n_rows {
        row_offsets[r + 1] += row_offsets[r];
    }
    Ok(SparseMatrix {
        n_rows,
        n_cols,
        row_offsets,
        col_indices,
        values,
    })
}

impl<T: Scalar> SparseMatrix<T> {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_offsets: vec![0; n_rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![T::one(); n])
    }

    pub fn diagonal(diag: &[T]) -> Self {
        let triples: Vec<_> = diag.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
        csr_from_coo(diag.len(), diag.len(), &triples).expect("diagonal entries are in range")
    }

    /// Sparse copy of a dense matrix, dropping exact zeros.
    pub fn from_dense(m: &Mat<T>) -> Result<Self> {
        let mut triples = Vec::new();
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                if m[(i, j)] != T::zero() {
                    triples.push((i, j, m[(i, j)]));
                }
            }
        }
        csr_from_coo(m.rows(), m.cols(), &triples)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Column indices and values stored in row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[T]) {
        let (a, b) = (self.row_offsets[i], self.row_offsets[i + 1]);
        (&self.col_indices[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => T::zero(),
        }
    }

    /// Stored entries as `(row, col, value)` in row-major order.
    pub fn triples(&self) -> Vec<(usize, usize, T)> {
        let mut out = Vec::with_capacity(self.nnz());
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            out.extend(cols.iter().zip(vals).map(|(&j, &v)| (i, j, v)));
        }
        out
    }

    pub fn to_dense(&self) -> Mat<T> {
        let mut m = Mat::zeros(self.n_rows, self.n_cols);
        for (i, j, v) in self.triples() {
            m[(i, j)] = v;
        }
        m
    }

    /// Largest `|a_ij - a_ji|` over all stored entries (infinite for non-square matrices).
    pub fn asymmetry(&self) -> f64 {
        if self.n_rows != self.n_cols {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for (i, j, v) in self.triples() {
            let d = (v - self.get(j, i)).abs().to_f64_lossy();
            worst = worst.max(d);
        }
        worst
    }

    /// Symmetric relabeling `P S P^T`: entry `(i, j)` moves to `(perm[i], perm[j])`.
    pub fn permute_symmetric(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_rows || self.n_rows != self.n_cols {
            return Err(Error::dim("permutation length must equal the matrix order"));
        }
        let triples: Vec<_> = self
            .triples()
            .into_iter()
            .map(|(i, j, v)| (perm[i], perm[j], v))
            .collect();
        csr_from_coo(self.n_rows, self.n_cols, &triples)
    }

    /// `alpha * self + beta * I`.
    pub fn scaled_plus_identity(&self, alpha: T, beta: T) -> Result<Self> {
        if self.n_rows != self.n_cols {
            return Err(Error::dim("matrix must be square"));
        }
        let mut triples: Vec<_> = self
            .triples()
            .into_iter()
            .map(|(i, j, v)| (i, j, alpha * v))
            .collect();
        triples.extend((0..self.n_rows).map(|i| (i, i, beta)));
        csr_from_coo(self.n_rows, self.n_cols, &triples)
    }

    pub fn cast<U: Scalar>(&self) -> SparseMatrix<U> {
        SparseMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_offsets: self.row_offsets.clone(),
            col_indices: self.col_indices.clone(),
            values: self.values.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }
}

/// Sparse times dense product `S * X`.
///
/// Each output entry sums the row's products `s_ij * x_jc` in ascending order of the
/// product values. The order is fixed for a given input, so runs are bit-reproducible,
/// and it does not depend on vertex labels, so relabeling the graph permutes the
/// output exactly.
pub fn spmm<T: Scalar>(s: &SparseMatrix<T>, x: &Mat<T>) -> Result<Mat<T>> {
    if s.n_cols != x.rows() {
        return Err(Error::dim(format!(
            "spmm {}x{} by {}x{}",
            s.n_rows,
            s.n_cols,
            x.rows(),
            x.cols()
        )));
    }
    let d = x.cols();
    let mut out = Mat::zeros(s.n_rows, d);
    let mut products: Vec<T> = Vec::new();
    for i in 0..s.n_rows {
        let (cols, vals) = s.row(i);
        let y = out.row_mut(i);
        for (c, yc) in y.iter_mut().enumerate() {
            products.clear();
            products.extend(cols.iter().zip(vals).map(|(&j, &v)| v * x[(j, c)]));
            // Finite values; equal keys (including signed zeros) add identically.
            products.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
            *yc = products.iter().fold(T::zero(), |acc, &p| acc + p);
        }
    }
    Ok(out)
}

/// Dominant eigenvalue of a symmetric positive semi-definite matrix by power iteration.
///
/// Stops once the residual `||S v - λ v||` falls below `tol * max(1, |λ|)`, which places
/// `λ` within that distance of an eigenvalue of `S`. The start vector is drawn from a
/// ChaCha stream seeded with `seed`.
pub fn power_iteration_lmax<T: Scalar>(
    s: &SparseMatrix<T>,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<T> {
    if s.n_rows != s.n_cols {
        return Err(Error::dim("power iteration needs a square matrix"));
    }
    if s.n_rows == 0 {
        return Err(Error::invalid("power iteration needs n >= 1"));
    }
    let asym = s.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let n = s.n_rows;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Mat::from_fn(n, 1, |_, _| T::of(rng.gen_range(-1.0..1.0)));
    normalize(&mut v);

    let mut lambda = T::zero();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter.max(1) {
        let w = spmm(s, &v)?;
        lambda = v.dot(&w);
        residual = w
            .zip_map(&v, |wi, vi| wi - lambda * vi)
            .as_slice()
            .iter()
            .fold(T::zero(), |acc, &r| acc + r * r)
            .sqrt()
            .to_f64_lossy();
        let lam = lambda.to_f64_lossy();
        if residual <= tol * lam.abs().max(1.0) {
            return Ok(lambda);
        }
        let norm = w.dot(&w).sqrt();
        if norm == T::zero() {
            return Ok(T::zero());
        }
        v = w.scale(T::one() / norm);
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        estimate: lambda.to_f64_lossy(),
        residual,
    })
}

fn normalize<T: Scalar>(v: &mut Mat<T>) {
    let norm = v.dot(v).sqrt();
    if norm > T::zero() {
        for x in v.as_mut_slice() {
            *x = *x / norm;
        }
    }
}
