//! LSTM step shared by `fclstm`, `gcrn_m1` and `gclstm_m2`.
//!
//! Gate pre-activations are formed as `(W_x x + W_h h) + w_c ⊙ c + b`, in that order.

use crate::chebyshev::{cheb_basis, cheb_basis_backward, ChebCache};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::sparse::SparseMatrix;
use crate::tensor::Mat;

use super::{CellParams, Peepholes};

#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    /// Basis of the raw input for the `gcrn_m1` feature bank.
    feature_basis: Option<ChebCache<T>>,
    xb: ChebCache<T>,
    hb: ChebCache<T>,
    c_prev: Mat<T>,
    i: Mat<T>,
    f: Mat<T>,
    g: Mat<T>,
    o: Mat<T>,
    c: Mat<T>,
    tanh_c: Mat<T>,
}

impl<T: Scalar> LstmCache<T> {
    /// Input, forget and output gate activations.
    pub fn gates(&self) -> [&Mat<T>; 3] {
        [&self.i, &self.f, &self.o]
    }

    /// Candidate `tanh(W_xc x + W_hc h + b_c)`.
    pub fn candidate(&self) -> &Mat<T> {
        &self.g
    }

    /// Output of the Chebyshev feature stage (`gcrn_m1`), or the raw input.
    pub fn lstm_input(&self) -> &Mat<T> {
        &self.xb.basis()[0]
    }
}

fn peep_row(mode: Peepholes, v: usize) -> usize {
    match mode {
        Peepholes::PerVertex => v,
        _ => 0,
    }
}

fn gate_preactivations<T: Scalar>(
    p: &CellParams<T>,
    xb: &ChebCache<T>,
    hb: &ChebCache<T>,
) -> Result<Vec<Mat<T>>> {
    (0..p.input_maps.len())
        .map(|g| {
            let mut a = p.input_maps[g].apply(xb)?;
            a.add_assign(&p.hidden_maps[g].apply(hb)?);
            Ok(a)
        })
        .collect()
}

pub(super) fn forward<T: Scalar>(
    p: &CellParams<T>,
    lap: Option<&SparseMatrix<T>>,
    x: &Mat<T>,
    h_prev: &Mat<T>,
    c_prev: &Mat<T>,
) -> Result<(Mat<T>, Mat<T>, LstmCache<T>)> {
    let spec = p.spec;
    let (x_in, feature_basis) = match &p.feature {
        Some(bank) => {
            let fb = cheb_basis(lap, x, bank.k())?;
            (bank.apply(&fb)?, Some(fb))
        }
        None => (x.clone(), None),
    };
    let ks = p.input_maps[0].k();
    let xb = cheb_basis(lap, &x_in, ks)?;
    let hb = cheb_basis(lap, h_prev, ks)?;
    let pre = gate_preactivations(p, &xb, &hb)?;

    let (n, d) = (spec.n, spec.d_h);
    let mut i_m = Mat::zeros(n, d);
    let mut f_m = Mat::zeros(n, d);
    let mut g_m = Mat::zeros(n, d);
    let mut o_m = Mat::zeros(n, d);
    let mut c_m = Mat::zeros(n, d);
    let mut tc_m = Mat::zeros(n, d);
    let mut h_m = Mat::zeros(n, d);
    let peep = !p.peepholes.is_empty();
    for v in 0..n {
        let pr = peep_row(spec.peepholes, v);
        for j in 0..d {
            let cp = c_prev[(v, j)];
            let mut zi = pre[0][(v, j)];
            let mut zf = pre[1][(v, j)];
            if peep {
                zi = zi + p.peepholes[0][(pr, j)] * cp;
                zf = zf + p.peepholes[1][(pr, j)] * cp;
            }
            zi = zi + p.biases[0][j];
            zf = zf + p.biases[1][j];
            let zc = pre[2][(v, j)] + p.biases[2][j];
            let i = zi.sigmoid();
            let f = zf.sigmoid();
            let g = zc.tanh();
            let c = f * cp + i * g;
            let mut zo = pre[3][(v, j)];
            if peep {
                zo = zo + p.peepholes[2][(pr, j)] * c;
            }
            zo = zo + p.biases[3][j];
            let o = zo.sigmoid();
            let tc = c.tanh();
            i_m[(v, j)] = i;
            f_m[(v, j)] = f;
            g_m[(v, j)] = g;
            o_m[(v, j)] = o;
            c_m[(v, j)] = c;
            tc_m[(v, j)] = tc;
            h_m[(v, j)] = o * tc;
        }
    }
    let cache = LstmCache {
        feature_basis,
        xb,
        hb,
        c_prev: c_prev.clone(),
        i: i_m,
        f: f_m,
        g: g_m,
        o: o_m,
        c: c_m.clone(),
        tanh_c: tc_m,
    };
    Ok((h_m, c_m, cache))
}

pub(super) fn backward<T: Scalar>(
    p: &CellParams<T>,
    lap: Option<&SparseMatrix<T>>,
    cache: &LstmCache<T>,
    dh: &Mat<T>,
    dc_next: &Mat<T>,
    grads: &mut CellParams<T>,
) -> Result<(Mat<T>, Mat<T>, Mat<T>)> {
    let spec = p.spec;
    let (n, d) = (spec.n, spec.d_h);
    let one = T::one();
    let peep = !p.peepholes.is_empty();
    let mut dz: Vec<Mat<T>> = (0..4).map(|_| Mat::zeros(n, d)).collect();
    let mut dc_prev = Mat::zeros(n, d);
    for v in 0..n {
        let pr = peep_row(spec.peepholes, v);
        for j in 0..d {
            let (i, f, g, o) = (cache.i[(v, j)], cache.f[(v, j)], cache.g[(v, j)], cache.o[(v, j)]);
            let (c, tc, cp) = (cache.c[(v, j)], cache.tanh_c[(v, j)], cache.c_prev[(v, j)]);
            let gh = dh[(v, j)];
            let dzo = gh * tc * o * (one - o);
            let mut dc = dc_next[(v, j)] + gh * o * (one - tc * tc);
            if peep {
                dc = dc + dzo * p.peepholes[2][(pr, j)];
                grads.peepholes[2][(pr, j)] = grads.peepholes[2][(pr, j)] + dzo * c;
            }
            let dzi = dc * g * i * (one - i);
            let dzf = dc * cp * f * (one - f);
            let dzc = dc * i * (one - g * g);
            let mut dcp = dc * f;
            if peep {
                dcp = dcp + dzi * p.peepholes[0][(pr, j)] + dzf * p.peepholes[1][(pr, j)];
                grads.peepholes[0][(pr, j)] = grads.peepholes[0][(pr, j)] + dzi * cp;
                grads.peepholes[1][(pr, j)] = grads.peepholes[1][(pr, j)] + dzf * cp;
            }
            dc_prev[(v, j)] = dcp;
            for (gate, val) in [dzi, dzf, dzc, dzo].into_iter().enumerate() {
                dz[gate][(v, j)] = val;
                grads.biases[gate][j] = grads.biases[gate][j] + val;
            }
        }
    }

    let mut dxb = cache.xb.zeros_like();
    let mut dhb = cache.hb.zeros_like();
    for (g, dzg) in dz.iter().enumerate() {
        p.input_maps[g].backward(&cache.xb, dzg, grads.input_maps[g].coeffs_mut(), Some(&mut dxb))?;
        p.hidden_maps[g].backward(&cache.hb, dzg, grads.hidden_maps[g].coeffs_mut(), Some(&mut dhb))?;
    }
    let dx_in = cheb_basis_backward(lap, dxb)?;
    let dh_prev = cheb_basis_backward(lap, dhb)?;
    let dx = match (&p.feature, &cache.feature_basis) {
        (Some(bank), Some(fb)) => {
            let mut dfb = fb.zeros_like();
            let gf = grads.feature.as_mut().expect("same spec as params");
            bank.backward(fb, &dx_in, gf.coeffs_mut(), Some(&mut dfb))?;
            cheb_basis_backward(lap, dfb)?
        }
        _ => dx_in,
    };
    Ok((dx, dh_prev, dc_prev))
}
