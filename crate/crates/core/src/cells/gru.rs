//! Graph GRU:
//! `z = σ(..)`, `r = σ(..)`, `h̃ = tanh(W_xh *G x + W_hh *G (r ⊙ h_prev) + b_h)`,
//! `h = z ⊙ h_prev + (1 - z) ⊙ h̃`.

use crate::chebyshev::{cheb_basis, cheb_basis_backward, ChebCache};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::sparse::SparseMatrix;
use crate::tensor::Mat;

use super::CellParams;

#[derive(Debug, Clone)]
pub struct GruCache<T> {
    xb: ChebCache<T>,
    hb: ChebCache<T>,
    /// Basis of `r ⊙ h_prev`.
    rhb: ChebCache<T>,
    z: Mat<T>,
    r: Mat<T>,
    h_tilde: Mat<T>,
}

impl<T: Scalar> GruCache<T> {
    /// Update and reset gate activations.
    pub fn gates(&self) -> [&Mat<T>; 2] {
        [&self.z, &self.r]
    }
}

fn add_bias<T: Scalar>(m: &mut Mat<T>, b: &[T], f: impl Fn(T) -> T) {
    for v in 0..m.rows() {
        for (x, &bj) in m.row_mut(v).iter_mut().zip(b) {
            *x = f(*x + bj);
        }
    }
}

pub(super) fn forward<T: Scalar>(
    p: &CellParams<T>,
    lap: Option<&SparseMatrix<T>>,
    x: &Mat<T>,
    h_prev: &Mat<T>,
) -> Result<(Mat<T>, GruCache<T>)> {
    let k = p.input_maps[0].k();
    let xb = cheb_basis(lap, x, k)?;
    let hb = cheb_basis(lap, h_prev, k)?;
    let mut z = p.input_maps[0].apply(&xb)?;
    z.add_assign(&p.hidden_maps[0].apply(&hb)?);
    add_bias(&mut z, &p.biases[0], T::sigmoid);
    let mut r = p.input_maps[1].apply(&xb)?;
    r.add_assign(&p.hidden_maps[1].apply(&hb)?);
    add_bias(&mut r, &p.biases[1], T::sigmoid);
    let rh = r.zip_map(h_prev, |a, b| a * b);
    let rhb = cheb_basis(lap, &rh, k)?;
    let mut h_tilde = p.input_maps[2].apply(&xb)?;
    h_tilde.add_assign(&p.hidden_maps[2].apply(&rhb)?);
    add_bias(&mut h_tilde, &p.biases[2], T::tanh);
    let mut h = Mat::zeros(h_prev.rows(), h_prev.cols());
    for ((hv, (&zv, &hp)), &ht) in h
        .as_mut_slice()
        .iter_mut()
        .zip(z.as_slice().iter().zip(h_prev.as_slice()))
        .zip(h_tilde.as_slice())
    {
        *hv = zv * hp + (T::one() - zv) * ht;
    }
    Ok((h, GruCache { xb, hb, rhb, z, r, h_tilde }))
}

pub(super) fn backward<T: Scalar>(
    p: &CellParams<T>,
    lap: Option<&SparseMatrix<T>>,
    cache: &GruCache<T>,
    dh: &Mat<T>,
    grads: &mut CellParams<T>,
) -> Result<(Mat<T>, Mat<T>)> {
    let one = T::one();
    let h_prev = &cache.hb.basis()[0];
    let (n, d) = h_prev.shape();
    let mut dzz = Mat::zeros(n, d);
    let mut dzh = Mat::zeros(n, d);
    let mut dh_prev = Mat::zeros(n, d);
    for v in 0..n {
        for j in 0..d {
            let (z, ht, hp, g) = (cache.z[(v, j)], cache.h_tilde[(v, j)], h_prev[(v, j)], dh[(v, j)]);
            dzz[(v, j)] = g * (hp - ht) * z * (one - z);
            dzh[(v, j)] = g * (one - z) * (one - ht * ht);
            dh_prev[(v, j)] = g * z;
        }
    }
    let mut dxb = cache.xb.zeros_like();
    let mut dhb = cache.hb.zeros_like();
    let mut drhb = cache.rhb.zeros_like();
    p.input_maps[2].backward(&cache.xb, &dzh, grads.input_maps[2].coeffs_mut(), Some(&mut dxb))?;
    p.hidden_maps[2].backward(&cache.rhb, &dzh, grads.hidden_maps[2].coeffs_mut(), Some(&mut drhb))?;
    let drh = cheb_basis_backward(lap, drhb)?;
    let mut dzr = Mat::zeros(n, d);
    for v in 0..n {
        for j in 0..d {
            let (r, hp, g) = (cache.r[(v, j)], h_prev[(v, j)], drh[(v, j)]);
            dzr[(v, j)] = g * hp * r * (one - r);
            dh_prev[(v, j)] = dh_prev[(v, j)] + g * r;
        }
    }
    for (gate, dzg) in [(0, &dzz), (1, &dzr), (2, &dzh)] {
        for v in 0..n {
            for (bj, &gv) in grads.biases[gate].iter_mut().zip(dzg.row(v)) {
                *bj = *bj + gv;
            }
        }
    }
    for (gate, dzg) in [(0, &dzz), (1, &dzr)] {
        p.input_maps[gate].backward(&cache.xb, dzg, grads.input_maps[gate].coeffs_mut(), Some(&mut dxb))?;
        p.hidden_maps[gate].backward(&cache.hb, dzg, grads.hidden_maps[gate].coeffs_mut(), Some(&mut dhb))?;
    }
    dh_prev.add_assign(&cheb_basis_backward(lap, dhb)?);
    Ok((cheb_basis_backward(lap, dxb)?, dh_prev))
}
