//! Chebyshev spectral graph filters `Y = Σ_k T_k(L̃) X Θ_k` and their exact adjoints.
//!
//! The basis signals `T_k(L̃) X` come from the three-term recurrence
//! `T_k = 2 L̃ T_{k-1} - T_{k-2}` with `T_0 = X`, `T_1 = L̃ X`, so a filter of support
//! `K` costs `K - 1` sparse products and never touches an eigendecomposition.
//! A delta signal therefore spreads at most `K - 1` hops.
//!
//! The backward pass relies on `L̃` being symmetric, so `T_k(L̃)^T = T_k(L̃)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::{spmm, SparseMatrix};
use crate::tensor::{mix_acc, mix_backward, Mat};

/// Largest graph accepted by [`cheb_forward_dense_oracle`].
pub const DENSE_ORACLE_MAX_N: usize = 64;

/// Chebyshev coefficients `Θ` of shape `K x d_in x d_out`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebFilterBank<T> {
    k: usize,
    d_in: usize,
    d_out: usize,
    theta: Vec<T>,
}

/// Basis signals `T_k(L̃) X` for `k < K`, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebCache<T> {
    basis: Vec<Mat<T>>,
}

impl<T: Scalar> ChebFilterBank<T> {
    pub fn zeros(k: usize, d_in: usize, d_out: usize) -> Self {
        Self {
            k,
            d_in,
            d_out,
            theta: vec![T::zero(); k * d_in * d_out],
        }
    }

    pub fn from_vec(k: usize, d_in: usize, d_out: usize, theta: Vec<T>) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("filter support K must be at least 1"));
        }
        if theta.len() != k * d_in * d_out {
            return Err(Error::dim(format!(
                "{} coefficients for a {k}x{d_in}x{d_out} bank",
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("filter coefficients must be finite"));
        }
        Ok(Self { k, d_in, d_out, theta })
    }

    /// Uniform in `[-a, a]` with `a = sqrt(6 / (K (d_in + d_out)))`.
    pub fn glorot(k: usize, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (k * (d_in + d_out)) as f64).sqrt();
        let theta = (0..k * d_in * d_out)
            .map(|_| T::of(rng.gen_range(-a..=a)))
            .collect();
        Self { k, d_in, d_out, theta }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn coeffs(&self) -> &[T] {
        &self.theta
    }

    pub fn coeffs_mut(&mut self) -> &mut [T] {
        &mut self.theta
    }

    /// `Θ_k` as a `d_in x d_out` slice.
    pub fn slice(&self, k: usize) -> &[T] {
        let len = self.d_in * self.d_out;
        &self.theta[k * len..(k + 1) * len]
    }

    fn check_cache(&self, cache: &ChebCache<T>) -> Result<()> {
        if cache.basis.len() < self.k {
            return Err(Error::dim(format!(
                "cache holds {} basis signals, bank needs {}",
                cache.basis.len(),
                self.k
            )));
        }
        if cache.basis[0].cols() != self.d_in {
            return Err(Error::dim(format!(
                "signal has {} channels, bank expects {}",
                cache.basis[0].cols(),
                self.d_in
            )));
        }
        Ok(())
    }

    /// `Σ_k basis_k Θ_k` over the first `K` cached basis signals.
    pub fn apply(&self, cache: &ChebCache<T>) -> Result<Mat<T>> {
        self.check_cache(cache)?;
        let mut y = Mat::zeros(cache.n(), self.d_out);
        for k in 0..self.k {
            mix_acc(&mut y, &cache.basis[k], self.slice(k));
        }
        Ok(y)
    }

    /// Accumulates `dΘ_k += basis_k^T dY` into `d_theta` and, when requested,
    /// `d_basis_k += dY Θ_k^T`.
    pub fn backward(
        &self,
        cache: &ChebCache<T>,
        dy: &Mat<T>,
        d_theta: &mut [T],
        mut d_basis: Option<&mut [Mat<T>]>,
    ) -> Result<()> {
        self.check_cache(cache)?;
        if dy.shape() != (cache.n(), self.d_out) {
            return Err(Error::dim(format!(
                "cotangent is {}x{}, expected {}x{}",
                dy.rows(),
                dy.cols(),
                cache.n(),
                self.d_out
            )));
        }
        if d_theta.len() != self.theta.len() {
            return Err(Error::dim("coefficient gradient has the wrong length"));
        }
        let len = self.d_in * self.d_out;
        for k in 0..self.k {
            let db = d_basis.as_deref_mut().map(|b| &mut b[k]);
            mix_backward(
                &cache.basis[k],
                self.slice(k),
                dy,
                &mut d_theta[k * len..(k + 1) * len],
                db,
            );
        }
        Ok(())
    }
}

impl<T: Scalar> ChebCache<T> {
    pub fn n(&self) -> usize {
        self.basis[0].rows()
    }

    pub fn d(&self) -> usize {
        self.basis[0].cols()
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn basis(&self) -> &[Mat<T>] {
        &self.basis
    }

    /// Zeroed cotangents matching the cached basis signals.
    pub fn zeros_like(&self) -> Vec<Mat<T>> {
        self.basis
            .iter()
            .map(|b| Mat::zeros(b.rows(), b.cols()))
            .collect()
    }
}

/// Basis signals `T_0(L̃) X, …, T_{K-1}(L̃) X`. `K = 1` needs no Laplacian.
pub fn cheb_basis<T: Scalar>(
    lap: Option<&SparseMatrix<T>>,
    x: &Mat<T>,
    k: usize,
) -> Result<ChebCache<T>> {
    if k == 0 {
        return Err(Error::invalid("filter support K must be at least 1"));
    }
    let mut basis = Vec::with_capacity(k);
    basis.push(x.clone());
    if k == 1 {
        return Ok(ChebCache { basis });
    }
    let lap = lap.ok_or_else(|| Error::invalid("support K > 1 needs a scaled Laplacian"))?;
    if lap.n_rows() != x.rows() || lap.n_cols() != x.rows() {
        return Err(Error::dim(format!(
            "Laplacian is {}x{}, signal has {} vertices",
            lap.n_rows(),
            lap.n_cols(),
            x.rows()
        )));
    }
    basis.push(spmm(lap, x)?);
    for i in 2..k {
        let lt = spmm(lap, &basis[i - 1])?;
        let next = lt.zip_map(&basis[i - 2], |a, b| T::two() * a - b);
        basis.push(next);
    }
    Ok(ChebCache { basis })
}

/// Adjoint of [`cheb_basis`]: maps cotangents of the basis signals to the cotangent of `X`.
pub fn cheb_basis_backward<T: Scalar>(
    lap: Option<&SparseMatrix<T>>,
    mut d_basis: Vec<Mat<T>>,
) -> Result<Mat<T>> {
    let k = d_basis.len();
    if k == 0 {
        return Err(Error::invalid("empty basis cotangent"));
    }
    if k > 1 {
        let lap = lap.ok_or_else(|| Error::invalid("support K > 1 needs a scaled Laplacian"))?;
        for i in (2..k).rev() {
            let gi = std::mem::replace(&mut d_basis[i], Mat::zeros(0, 0));
            let lg = spmm(lap, &gi)?;
            for (a, &b) in d_basis[i - 1].as_mut_slice().iter_mut().zip(lg.as_slice()) {
                *a = *a + T::two() * b;
            }
            for (a, &b) in d_basis[i - 2].as_mut_slice().iter_mut().zip(gi.as_slice()) {
                *a = *a - b;
            }
        }
        let lg = spmm(lap, &d_basis[1])?;
        d_basis[0].add_assign(&lg);
    }
    Ok(d_basis.swap_remove(0))
}

/// Filters `X` through `bank`: `Y = Σ_{k<K} T_k(L̃) X Θ_k`.
pub fn cheb_forward<T: Scalar>(
    lap: &SparseMatrix<T>,
    x: &Mat<T>,
    bank: &ChebFilterBank<T>,
) -> Result<(Mat<T>, ChebCache<T>)> {
    if x.cols() != bank.d_in {
        return Err(Error::dim(format!(
            "signal has {} channels, bank expects {}",
            x.cols(),
            bank.d_in
        )));
    }
    if lap.n_rows() != x.rows() || lap.n_cols() != x.rows() {
        return Err(Error::dim(format!(
            "Laplacian is {}x{}, signal has {} vertices",
            lap.n_rows(),
            lap.n_cols(),
            x.rows()
        )));
    }
    let cache = cheb_basis(Some(lap), x, bank.k)?;
    let y = bank.apply(&cache)?;
    Ok((y, cache))
}

/// Exact adjoint of [`cheb_forward`]: returns `(dX, dΘ)`.
pub fn cheb_backward<T: Scalar>(
    lap: &SparseMatrix<T>,
    cache: &ChebCache<T>,
    bank: &ChebFilterBank<T>,
    dy: &Mat<T>,
) -> Result<(Mat<T>, ChebFilterBank<T>)> {
    if cache.len() != bank.k {
        return Err(Error::dim(format!(
            "cache holds {} basis signals, bank has support {}",
            cache.len(),
            bank.k
        )));
    }
    let mut d_theta = ChebFilterBank::zeros(bank.k, bank.d_in, bank.d_out);
    let mut d_basis = cache.zeros_like();
    bank.backward(cache, dy, &mut d_theta.theta, Some(&mut d_basis))?;
    let dx = cheb_basis_backward(Some(lap), d_basis)?;
    Ok((dx, d_theta))
}

/// Reference evaluation that forms every `T_k(L̃)` as a dense `n x n` matrix.
pub fn cheb_forward_dense_oracle<T: Scalar>(
    lap: &Mat<T>,
    x: &Mat<T>,
    bank: &ChebFilterBank<T>,
) -> Result<Mat<T>> {
    let n = lap.rows();
    if n > DENSE_ORACLE_MAX_N {
        return Err(Error::invalid(format!(
            "dense oracle limited to n <= {DENSE_ORACLE_MAX_N}"
        )));
    }
    if lap.cols() != n || x.rows() != n || x.cols() != bank.d_in {
        return Err(Error::dim("oracle operand shapes disagree"));
    }
    let mut prev = Mat::identity(n);
    let mut cur = lap.clone();
    let mut y = Mat::zeros(n, bank.d_out);
    for k in 0..bank.k {
        let poly = match k {
            0 => prev.clone(),
            1 => cur.clone(),
            _ => {
                let next = lap.matmul(&cur)?.zip_map(&prev, |a, b| T::two() * a - b);
                prev = std::mem::replace(&mut cur, next);
                cur.clone()
            }
        };
        let theta = Mat::from_vec(bank.d_in, bank.d_out, bank.slice(k).to_vec())?;
        y.add_assign(&poly.matmul(x)?.matmul(&theta)?);
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::csr_from_coo;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn swap2() -> SparseMatrix<f64> {
        csr_from_coo(2, 2, &[(0, 1, -1.0), (1, 0, -1.0)]).unwrap()
    }

    #[test]
    fn k1_is_channel_mixing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = ChebFilterBank::<f64>::glorot(1, 2, 3, &mut rng);
        let x = Mat::from_fn(4, 2, |i, j| (i as f64) - 0.5 * j as f64);
        let lap = SparseMatrix::identity(4);
        let (y, cache) = cheb_forward(&lap, &x, &bank).unwrap();
        let theta = Mat::from_vec(2, 3, bank.coeffs().to_vec()).unwrap();
        assert_eq!(y, x.matmul(&theta).unwrap());
        assert_eq!(cache.basis()[0], x);
    }

    #[test]
    fn k2_hand_example() {
        let bank = ChebFilterBank::from_vec(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let x = Mat::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let (y, _) = cheb_forward(&swap2(), &x, &bank).unwrap();
        assert_eq!(y.as_slice(), &[0.0, -1.0]);
    }

    #[test]
    fn identity_laplacian_sums_coefficients() {
        let bank = ChebFilterBank::from_vec(4, 1, 1, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let x = Mat::from_vec(3, 1, vec![1.0, -2.0, 3.0]).unwrap();
        let (y, _) = cheb_forward(&SparseMatrix::identity(3), &x, &bank).unwrap();
        assert_eq!(y, x.scale(1.75));
        let oracle = cheb_forward_dense_oracle(&Mat::identity(3), &x, &bank).unwrap();
        assert_eq!(oracle, x.scale(1.75));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bank = ChebFilterBank::<f64>::glorot(3, 2, 2, &mut rng);
        let x = Mat::from_fn(2, 2, |i, j| (i + 2 * j) as f64);
        let (_, cache) = cheb_forward(&swap2(), &x, &bank).unwrap();
        let (dx, dt) = cheb_backward(&swap2(), &cache, &bank, &Mat::zeros(2, 2)).unwrap();
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
        assert!(dt.coeffs().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn k1_backward_is_linear_adjoint() {
        let bank = ChebFilterBank::from_vec(1, 2, 1, vec![2.0, -1.0]).unwrap();
        let x = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let dy = Mat::from_vec(2, 1, vec![1.0, 0.5]).unwrap();
        let (_, cache) = cheb_forward(&swap2(), &x, &bank).unwrap();
        let (dx, dt) = cheb_backward(&swap2(), &cache, &bank, &dy).unwrap();
        assert_eq!(dx.as_slice(), &[2.0, -1.0, 1.0, -0.5]);
        assert_eq!(dt.coeffs(), &[2.5, 4.0]);
    }

    #[test]
    fn shape_errors() {
        let bank = ChebFilterBank::<f64>::zeros(2, 2, 1);
        assert!(cheb_forward(&swap2(), &Mat::zeros(2, 3), &bank).is_err());
        assert!(cheb_forward(&swap2(), &Mat::zeros(3, 2), &bank).is_err());
        let (_, cache) = cheb_forward(&swap2(), &Mat::zeros(2, 2), &bank).unwrap();
        assert!(cheb_backward(&swap2(), &cache, &bank, &Mat::zeros(2, 2)).is_err());
        let other = ChebFilterBank::<f64>::zeros(3, 2, 1);
        assert!(cheb_backward(&swap2(), &cache, &other, &Mat::zeros(2, 1)).is_err());
        assert!(ChebFilterBank::<f64>::from_vec(0, 1, 1, vec![]).is_err());
        assert!(ChebFilterBank::from_vec(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn glorot_bound_and_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = ChebFilterBank::<f64>::glorot(3, 4, 5, &mut rng);
        assert_eq!(bank.param_count(), 60);
        let a = (6.0f64 / 27.0).sqrt();
        assert!(bank.coeffs().iter().all(|v| v.abs() <= a));
    }
}
