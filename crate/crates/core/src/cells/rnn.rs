//! Graph vanilla RNN: `h_t = tanh((W_x *G x_t + W_h *G h_{t-1}) + b)`.

use crate::chebyshev::{cheb_basis, cheb_basis_backward, ChebCache};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::sparse::SparseMatrix;
use crate::tensor::Mat;

use super::CellParams;

#[derive(Debug, Clone)]
pub struct RnnCache<T> {
    xb: ChebCache<T>,
    hb: ChebCache<T>,
    h: Mat<T>,
}

pub(super) fn forward<T: Scalar>(
    p: &CellParams<T>,
    lap: Option<&SparseMatrix<T>>,
    x: &Mat<T>,
    h_prev: &Mat<T>,
) -> Result<(Mat<T>, RnnCache<T>)> {
    let k = p.input_maps[0].k();
    let xb = cheb_basis(lap, x, k)?;
    let hb = cheb_basis(lap, h_prev, k)?;
    let mut pre = p.input_maps[0].apply(&xb)?;
    pre.add_assign(&p.hidden_maps[0].apply(&hb)?);
    let b = &p.biases[0];
    let mut h = pre;
    for v in 0..h.rows() {
        for (hj, &bj) in h.row_mut(v).iter_mut().zip(b) {
            *hj = (*hj + bj).tanh();
        }
    }
    Ok((h.clone(), RnnCache { xb, hb, h }))
}

pub(super) fn backward<T: Scalar>(
    p: &CellParams<T>,
    lap: Option<&SparseMatrix<T>>,
    cache: &RnnCache<T>,
    dh: &Mat<T>,
    grads: &mut CellParams<T>,
) -> Result<(Mat<T>, Mat<T>)> {
    let dz = cache.h.zip_map(dh, |h, g| g * (T::one() - h * h));
    for v in 0..dz.rows() {
        for (bj, &g) in grads.biases[0].iter_mut().zip(dz.row(v)) {
            *bj = *bj + g;
        }
    }
    let mut dxb = cache.xb.zeros_like();
    let mut dhb = cache.hb.zeros_like();
    p.input_maps[0].backward(&cache.xb, &dz, grads.input_maps[0].coeffs_mut(), Some(&mut dxb))?;
    p.hidden_maps[0].backward(&cache.hb, &dz, grads.hidden_maps[0].coeffs_mut(), Some(&mut dhb))?;
    Ok((cheb_basis_backward(lap, dxb)?, cheb_basis_backward(lap, dhb)?))
}
