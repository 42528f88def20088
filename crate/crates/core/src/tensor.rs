//! Row-major dense matrices used for graph signals (`n x d`) and dense weights.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped matrices.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Dense product `self * rhs`, accumulating over the inner index in ascending order.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::dim(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] = out.data[i * rhs.cols + j] + a * rhs[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    /// Rows reordered so that row `perm[i]` of the result is row `i` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, self.cols);
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(p).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// `out += input * weights` where `weights` is a row-major `d_in x d_out` block.
///
/// Every channel-mixing product in the crate goes through this kernel so that
/// equal inputs produce bitwise equal outputs regardless of which layer type
/// owns the weights.
pub(crate) fn mix_acc<T: Scalar>(out: &mut Mat<T>, input: &Mat<T>, weights: &[T]) {
    let d_in = input.cols();
    let d_out = out.cols();
    debug_assert_eq!(weights.len(), d_in * d_out);
    debug_assert_eq!(out.rows(), input.rows());
    for v in 0..input.rows() {
        let x = input.row(v);
        let y = &mut out.data[v * d_out..(v + 1) * d_out];
        for (c, &xc) in x.iter().enumerate() {
            let w = &weights[c * d_out..(c + 1) * d_out];
            for (yo, &wo) in y.iter_mut().zip(w) {
                *yo = *yo + xc * wo;
            }
        }
    }
}

/// Adjoint of [`mix_acc`]: `d_weights += input^T * d_out` and `d_input += d_out * weights^T`.
pub(crate) fn mix_backward<T: Scalar>(
    input: &Mat<T>,
    weights: &[T],
    d_out: &Mat<T>,
    d_weights: &mut [T],
    d_input: Option<&mut Mat<T>>,
) {
    let d_in = input.cols();
    let n_out = d_out.cols();
    for v in 0..input.rows() {
        let x = input.row(v);
        let g = d_out.row(v);
        for (c, &xc) in x.iter().enumerate() {
            let dw = &mut d_weights[c * n_out..(c + 1) * n_out];
            for (dwo, &go) in dw.iter_mut().zip(g) {
                *dwo = *dwo + xc * go;
            }
        }
    }
    if let Some(dx) = d_input {
        for v in 0..input.rows() {
            let g = d_out.row(v);
            for c in 0..d_in {
                let w = &weights[c * n_out..(c + 1) * n_out];
                let s = g.iter().zip(w).fold(T::zero(), |acc, (&go, &wo)| acc + go * wo);
                dx[(v, c)] = dx[(v, c)] + s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[2.0, 1.0, 4.0, 3.0]);
        assert!(a.matmul(&Mat::zeros(3, 1)).is_err());
    }

    #[test]
    fn mix_matches_matmul() {
        let x = Mat::from_fn(3, 2, |i, j| (i * 2 + j) as f64 - 1.5);
        let w = Mat::from_fn(2, 4, |i, j| 0.25 * (i as f64) - 0.1 * j as f64);
        let mut out = Mat::zeros(3, 4);
        mix_acc(&mut out, &x, w.as_slice());
        assert!(out.max_abs_diff(&x.matmul(&w).unwrap()) < 1e-15);

        let g = Mat::from_fn(3, 4, |i, j| (i + j) as f64 * 0.3);
        let mut dw = vec![0.0; 8];
        let mut dx = Mat::zeros(3, 2);
        mix_backward(&x, w.as_slice(), &g, &mut dw, Some(&mut dx));
        let dw_ref = x.transpose().matmul(&g).unwrap();
        let dx_ref = g.matmul(&w.transpose()).unwrap();
        assert!(Mat::from_vec(2, 4, dw).unwrap().max_abs_diff(&dw_ref) < 1e-14);
        assert!(dx.max_abs_diff(&dx_ref) < 1e-14);
    }

    #[test]
    fn permute_rows_places_rows() {
        let x = Mat::from_fn(3, 1, |i, _| i as f64);
        let p = x.permute_rows(&[2, 0, 1]);
        assert_eq!(p.as_slice(), &[1.0, 2.0, 0.0]);
    }
}
