//! Recurrent cells: fully connected LSTM, graph-convolutional LSTM variants, graph
//! vanilla RNN and graph GRU, each with a single-step forward and exact adjoint.
//!
//! Every linear gate map is stored as a [`ChebFilterBank`]. The fully connected maps of
//! `fclstm` and of the LSTM half of `gcrn_m1` are banks of support one, i.e. dense
//! `d_in x d_out` matrices shared by all vertices.

mod gru;
mod lstm;
mod rnn;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chebyshev::ChebFilterBank;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::SparseMatrix;
use crate::tensor::Mat;

pub use gru::GruCache;
pub use lstm::LstmCache;
pub use rnn::RnnCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    /// Fully connected LSTM applied row-wise with vertex-shared weights.
    FcLstm,
    /// Chebyshev feature bank followed by a fully connected LSTM.
    GcrnM1,
    /// LSTM whose input and recurrent maps are all Chebyshev graph convolutions.
    GcLstmM2,
    /// `h_t = tanh(W_x *G x_t + W_h *G h_{t-1} + b)`.
    GcRnn,
    /// GRU with graph-convolutional gate maps.
    GcGru,
}

impl CellKind {
    pub const ALL: [CellKind; 5] = [
        CellKind::FcLstm,
        CellKind::GcrnM1,
        CellKind::GcLstmM2,
        CellKind::GcRnn,
        CellKind::GcGru,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::FcLstm => "fclstm",
            CellKind::GcrnM1 => "gcrn_m1",
            CellKind::GcLstmM2 => "gclstm_m2",
            CellKind::GcRnn => "gcrnn",
            CellKind::GcGru => "gcgru",
        }
    }

    pub fn is_lstm(self) -> bool {
        matches!(self, CellKind::FcLstm | CellKind::GcrnM1 | CellKind::GcLstmM2)
    }

    /// Whether the cell reads the graph at all.
    pub fn is_graph(self) -> bool {
        self != CellKind::FcLstm
    }

    /// Gate labels used in parameter names.
    pub fn gates(self) -> &'static [&'static str] {
        match self {
            CellKind::FcLstm | CellKind::GcrnM1 | CellKind::GcLstmM2 => &["i", "f", "c", "o"],
            CellKind::GcGru => &["z", "r", "h"],
            CellKind::GcRnn => &["h"],
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CellKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown cell kind `{s}` (expected fclstm, gcrn_m1, gclstm_m2, gcrnn or gcgru)"
                ))
            })
    }
}

/// Shape of the LSTM peephole weights `w_ci, w_cf, w_co`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Peepholes {
    /// One weight per vertex and channel (`n x d_h`).
    PerVertex,
    /// One weight per channel shared by all vertices (`d_h`).
    Shared,
    Disabled,
}

impl Peepholes {
    pub fn as_str(self) -> &'static str {
        match self {
            Peepholes::PerVertex => "per_vertex",
            Peepholes::Shared => "shared",
            Peepholes::Disabled => "disabled",
        }
    }
}

impl fmt::Display for Peepholes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Peepholes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_vertex" => Ok(Peepholes::PerVertex),
            "shared" => Ok(Peepholes::Shared),
            "disabled" | "none" => Ok(Peepholes::Disabled),
            _ => Err(Error::invalid(format!(
                "unknown peephole mode `{s}` (expected per_vertex, shared or disabled)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellSpec {
    pub kind: CellKind,
    /// Number of vertices.
    pub n: usize,
    pub d_x: usize,
    pub d_h: usize,
    /// Chebyshev support of the graph maps (ignored by `fclstm`).
    pub k: usize,
    pub peepholes: Peepholes,
}

impl CellSpec {
    pub fn new(kind: CellKind, n: usize, d_x: usize, d_h: usize, k: usize) -> Self {
        Self {
            kind,
            n,
            d_x,
            d_h,
            k,
            peepholes: Peepholes::PerVertex,
        }
    }

    pub fn with_peepholes(mut self, peepholes: Peepholes) -> Self {
        self.peepholes = peepholes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d_x == 0 || self.d_h == 0 {
            return Err(Error::invalid("n, d_x and d_h must be at least 1"));
        }
        if self.kind.is_graph() && self.k == 0 {
            return Err(Error::invalid("graph cells need support K >= 1"));
        }
        Ok(())
    }

    /// Support of the input and recurrent gate maps.
    fn map_support(&self) -> usize {
        match self.kind {
            CellKind::FcLstm | CellKind::GcrnM1 => 1,
            _ => self.k,
        }
    }

    fn has_peepholes(&self) -> bool {
        self.kind.is_lstm() && self.peepholes != Peepholes::Disabled
    }

    fn peephole_rows(&self) -> usize {
        match self.peepholes {
            Peepholes::PerVertex => self.n,
            _ => 1,
        }
    }
}

/// Closed-form number of trainable scalars of a cell.
///
/// Graph-convolutional gate maps contribute `K d_h (d_x + d_h)` each, fully connected
/// maps `d_h (d_x + d_h)`. Apart from per-vertex peepholes, nothing depends on `n`.
pub fn param_count(spec: &CellSpec) -> usize {
    let gates = spec.kind.gates().len();
    let maps = gates * spec.map_support() * spec.d_h * (spec.d_x + spec.d_h);
    let feature = match spec.kind {
        CellKind::GcrnM1 => spec.k * spec.d_x * spec.d_x,
        _ => 0,
    };
    let peep = if spec.has_peepholes() {
        3 * spec.peephole_rows() * spec.d_h
    } else {
        0
    };
    maps + feature + peep + gates * spec.d_h
}

/// All trainable tensors of one cell. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams<T> {
    spec: CellSpec,
    /// `W^CNN` of `gcrn_m1`, `K x d_x x d_x`.
    feature: Option<ChebFilterBank<T>>,
    input_maps: Vec<ChebFilterBank<T>>,
    hidden_maps: Vec<ChebFilterBank<T>>,
    /// `w_ci, w_cf, w_co`, each `rows x d_h` with `rows = n` or `1`.
    peepholes: Vec<Mat<T>>,
    biases: Vec<Vec<T>>,
}

/// Hidden matrix `h` and, for LSTM kinds, cell matrix `c`, both `n x d_h`.
/// Also used for cotangents flowing between time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState<T> {
    pub h: Mat<T>,
    pub c: Option<Mat<T>>,
}

impl<T: Scalar> CellState<T> {
    pub fn zeros(spec: &CellSpec) -> Self {
        Self {
            h: Mat::zeros(spec.n, spec.d_h),
            c: spec.kind.is_lstm().then(|| Mat::zeros(spec.n, spec.d_h)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.is_finite() && self.c.as_ref().map_or(true, Mat::is_finite)
    }
}

/// Intermediate values of one forward step.
#[derive(Debug, Clone)]
pub enum CellCache<T> {
    Lstm(LstmCache<T>),
    Rnn(RnnCache<T>),
    Gru(GruCache<T>),
}

impl<T: Scalar> CellParams<T> {
    /// Zero-valued parameters (the shape of a gradient accumulator).
    pub fn zeros(spec: CellSpec) -> Result<Self> {
        spec.validate()?;
        let gates = spec.kind.gates().len();
        let ks = spec.map_support();
        Ok(Self {
            spec,
            feature: (spec.kind == CellKind::GcrnM1)
                .then(|| ChebFilterBank::zeros(spec.k, spec.d_x, spec.d_x)),
            input_maps: (0..gates)
                .map(|_| ChebFilterBank::zeros(ks, spec.d_x, spec.d_h))
                .collect(),
            hidden_maps: (0..gates)
                .map(|_| ChebFilterBank::zeros(ks, spec.d_h, spec.d_h))
                .collect(),
            peepholes: if spec.has_peepholes() {
                (0..3).map(|_| Mat::zeros(spec.peephole_rows(), spec.d_h)).collect()
            } else {
                Vec::new()
            },
            biases: vec![vec![T::zero(); spec.d_h]; gates],
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.spec).expect("spec already validated")
    }

    pub fn spec(&self) -> &CellSpec {
        &self.spec
    }

    pub fn feature(&self) -> Option<&ChebFilterBank<T>> {
        self.feature.as_ref()
    }

    pub fn feature_mut(&mut self) -> Option<&mut ChebFilterBank<T>> {
        self.feature.as_mut()
    }

    /// Input map of gate `g` (index into [`CellKind::gates`]).
    pub fn input_map(&self, g: usize) -> &ChebFilterBank<T> {
        &self.input_maps[g]
    }

    pub fn input_map_mut(&mut self, g: usize) -> &mut ChebFilterBank<T> {
        &mut self.input_maps[g]
    }

    pub fn hidden_map(&self, g: usize) -> &ChebFilterBank<T> {
        &self.hidden_maps[g]
    }

    pub fn hidden_map_mut(&mut self, g: usize) -> &mut ChebFilterBank<T> {
        &mut self.hidden_maps[g]
    }

    /// Peephole weights `w_ci, w_cf, w_co` (empty when disabled).
    pub fn peepholes(&self) -> &[Mat<T>] {
        &self.peepholes
    }

    pub fn peepholes_mut(&mut self) -> &mut [Mat<T>] {
        &mut self.peepholes
    }

    pub fn bias(&self, g: usize) -> &[T] {
        &self.biases[g]
    }

    pub fn bias_mut(&mut self, g: usize) -> &mut [T] {
        &mut self.biases[g]
    }

    /// Named tensors with their logical shapes, in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let spec = &self.spec;
        let mut out = Vec::new();
        if let Some(f) = &self.feature {
            out.push(("w_cnn".to_string(), vec![f.k(), f.d_in(), f.d_out()]));
        }
        let dense = !matches!(spec.kind, CellKind::GcLstmM2 | CellKind::GcRnn | CellKind::GcGru);
        for (g, name) in spec.kind.gates().iter().enumerate() {
            for (prefix, bank) in [("w_x", &self.input_maps[g]), ("w_h", &self.hidden_maps[g])] {
                let shape = if dense {
                    vec![bank.d_in(), bank.d_out()]
                } else {
                    vec![bank.k(), bank.d_in(), bank.d_out()]
                };
                out.push((format!("{prefix}{name}"), shape));
            }
        }
        for (p, name) in self.peepholes.iter().zip(["w_ci", "w_cf", "w_co"]) {
            let shape = match spec.peepholes {
                Peepholes::PerVertex => vec![p.rows(), p.cols()],
                _ => vec![p.cols()],
            };
            out.push((name.to_string(), shape));
        }
        for name in spec.kind.gates() {
            out.push((format!("b_{name}"), vec![spec.d_h]));
        }
        out
    }

    /// Flat views of every tensor, in the order of [`Self::layout`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        if let Some(f) = &self.feature {
            out.push(f.coeffs());
        }
        for (a, b) in self.input_maps.iter().zip(&self.hidden_maps) {
            out.push(a.coeffs());
            out.push(b.coeffs());
        }
        out.extend(self.peepholes.iter().map(Mat::as_slice));
        out.extend(self.biases.iter().map(Vec::as_slice));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        if let Some(f) = &mut self.feature {
            out.push(f.coeffs_mut());
        }
        for (a, b) in self.input_maps.iter_mut().zip(self.hidden_maps.iter_mut()) {
            out.push(a.coeffs_mut());
            out.push(b.coeffs_mut());
        }
        out.extend(self.peepholes.iter_mut().map(Mat::as_mut_slice));
        out.extend(self.biases.iter_mut().map(Vec::as_mut_slice));
        out
    }

    /// Number of allocated scalars.
    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds `other` elementwise.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    fn check_input(&self, x: &Mat<T>, state: &CellState<T>) -> Result<()> {
        let s = &self.spec;
        if x.shape() != (s.n, s.d_x) {
            return Err(Error::dim(format!(
                "input is {}x{}, cell expects {}x{}",
                x.rows(),
                x.cols(),
                s.n,
                s.d_x
            )));
        }
        if state.h.shape() != (s.n, s.d_h) {
            return Err(Error::dim(format!(
                "hidden state is {}x{}, cell expects {}x{}",
                state.h.rows(),
                state.h.cols(),
                s.n,
                s.d_h
            )));
        }
        match (&state.c, s.kind.is_lstm()) {
            (Some(c), true) if c.shape() == (s.n, s.d_h) => Ok(()),
            (None, false) => Ok(()),
            _ => Err(Error::dim(format!("cell state does not match a {} cell", s.kind))),
        }
    }

    fn laplacian_for<'a>(&self, lap: Option<&'a SparseMatrix<T>>) -> Result<Option<&'a SparseMatrix<T>>> {
        if !self.spec.kind.is_graph() {
            return Ok(None);
        }
        match lap {
            Some(l) if l.n_rows() == self.spec.n && l.n_cols() == self.spec.n => Ok(Some(l)),
            Some(l) => Err(Error::dim(format!(
                "Laplacian is {}x{}, cell has {} vertices",
                l.n_rows(),
                l.n_cols(),
                self.spec.n
            ))),
            None if self.spec.k > 1 => Err(Error::invalid(format!(
                "{} cell with K = {} needs a scaled Laplacian",
                self.spec.kind, self.spec.k
            ))),
            None => Ok(None),
        }
    }

    /// One forward step of whatever kind this cell is.
    pub fn step(
        &self,
        lap: Option<&SparseMatrix<T>>,
        x: &Mat<T>,
        state: &CellState<T>,
    ) -> Result<(CellState<T>, CellCache<T>)> {
        self.check_input(x, state)?;
        let lap = self.laplacian_for(lap)?;
        match self.spec.kind {
            CellKind::FcLstm | CellKind::GcrnM1 | CellKind::GcLstmM2 => {
                let c = state.c.as_ref().expect("checked");
                let (h, c, cache) = lstm::forward(self, lap, x, &state.h, c)?;
                Ok((CellState { h, c: Some(c) }, CellCache::Lstm(cache)))
            }
            CellKind::GcRnn => {
                let (h, cache) = rnn::forward(self, lap, x, &state.h)?;
                Ok((CellState { h, c: None }, CellCache::Rnn(cache)))
            }
            CellKind::GcGru => {
                let (h, cache) = gru::forward(self, lap, x, &state.h)?;
                Ok((CellState { h, c: None }, CellCache::Gru(cache)))
            }
        }
    }

    /// Adjoint of [`Self::step`]. `d_h` is the cotangent of `h_t` from outside the
    /// recurrence, `d_next` the cotangent of the returned state coming back from step
    /// `t + 1`. Parameter gradients are added into `grads`; returns `(dx_t, d_state_{t-1})`.
    pub fn backward(
        &self,
        lap: Option<&SparseMatrix<T>>,
        cache: &CellCache<T>,
        d_h: &Mat<T>,
        d_next: Option<&CellState<T>>,
        grads: &mut CellParams<T>,
    ) -> Result<(Mat<T>, CellState<T>)> {
        if grads.spec != self.spec {
            return Err(Error::dim("gradient accumulator belongs to a different cell"));
        }
        let s = &self.spec;
        if d_h.shape() != (s.n, s.d_h) {
            return Err(Error::dim("hidden cotangent has the wrong shape"));
        }
        let lap = self.laplacian_for(lap)?;
        let mut dh = d_h.clone();
        let mut dc_next = None;
        if let Some(d) = d_next {
            if d.h.shape() != (s.n, s.d_h) {
                return Err(Error::dim("state cotangent has the wrong shape"));
            }
            dh.add_assign(&d.h);
            dc_next = d.c.as_ref();
        }
        match (s.kind, cache) {
            (CellKind::FcLstm | CellKind::GcrnM1 | CellKind::GcLstmM2, CellCache::Lstm(c)) => {
                let zero;
                let dc = match dc_next {
                    Some(dc) => dc,
                    None => {
                        zero = Mat::zeros(s.n, s.d_h);
                        &zero
                    }
                };
                let (dx, dh_prev, dc_prev) = lstm::backward(self, lap, c, &dh, dc, grads)?;
                Ok((dx, CellState { h: dh_prev, c: Some(dc_prev) }))
            }
            (CellKind::GcRnn, CellCache::Rnn(c)) => {
                let (dx, dh_prev) = rnn::backward(self, lap, c, &dh, grads)?;
                Ok((dx, CellState { h: dh_prev, c: None }))
            }
            (CellKind::GcGru, CellCache::Gru(c)) => {
                let (dx, dh_prev) = gru::backward(self, lap, c, &dh, grads)?;
                Ok((dx, CellState { h: dh_prev, c: None }))
            }
            _ => Err(Error::invalid(format!("cache does not belong to a {} cell", s.kind))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> CellParams<U> {
        let bank = |b: &ChebFilterBank<T>| {
            ChebFilterBank::from_vec(
                b.k(),
                b.d_in(),
                b.d_out(),
                b.coeffs().iter().map(|v| U::of(v.to_f64_lossy())).collect(),
            )
            .expect("same shape")
        };
        CellParams {
            spec: self.spec,
            feature: self.feature.as_ref().map(bank),
            input_maps: self.input_maps.iter().map(bank).collect(),
            hidden_maps: self.hidden_maps.iter().map(bank).collect(),
            peepholes: self.peepholes.iter().map(Mat::cast).collect(),
            biases: self
                .biases
                .iter()
                .map(|b| b.iter().map(|v| U::of(v.to_f64_lossy())).collect())
                .collect(),
        }
    }
}

/// Seeded initialization: Glorot-style uniform maps and peepholes; LSTM biases
/// `b_i = b_f = b_o = 1`, `b_c = 0`; GRU and RNN biases zero.
pub fn cell_init<T: Scalar>(spec: CellSpec, seed: u64) -> Result<CellParams<T>> {
    let mut p = CellParams::zeros(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(f) = &mut p.feature {
        *f = ChebFilterBank::glorot(f.k(), f.d_in(), f.d_out(), &mut rng);
    }
    for (a, b) in p.input_maps.iter_mut().zip(p.hidden_maps.iter_mut()) {
        *a = ChebFilterBank::glorot(a.k(), a.d_in(), a.d_out(), &mut rng);
        *b = ChebFilterBank::glorot(b.k(), b.d_in(), b.d_out(), &mut rng);
    }
    let a = (3.0 / spec.d_h as f64).sqrt();
    for m in &mut p.peepholes {
        for v in m.as_mut_slice() {
            *v = T::of(rng.gen_range(-a..=a));
        }
    }
    if spec.kind.is_lstm() {
        for (g, fill) in [(0, T::one()), (1, T::one()), (2, T::zero()), (3, T::one())] {
            p.biases[g].iter_mut().for_each(|b| *b = fill);
        }
    }
    Ok(p)
}

fn expect_kind<T: Scalar>(params: &CellParams<T>, kind: CellKind) -> Result<()> {
    if params.spec.kind != kind {
        return Err(Error::invalid(format!(
            "expected a {kind} cell, got {}",
            params.spec.kind
        )));
    }
    Ok(())
}

/// Fully connected LSTM step; returns `(h_t, new state, cache)`.
pub fn fclstm_step<T: Scalar>(
    params: &CellParams<T>,
    x: &Mat<T>,
    state: &CellState<T>,
) -> Result<(Mat<T>, CellState<T>, CellCache<T>)> {
    expect_kind(params, CellKind::FcLstm)?;
    let (s, c) = params.step(None, x, state)?;
    Ok((s.h.clone(), s, c))
}

/// Chebyshev feature extraction followed by a fully connected LSTM.
pub fn gcrn_m1_step<T: Scalar>(
    params: &CellParams<T>,
    lap: &SparseMatrix<T>,
    x: &Mat<T>,
    state: &CellState<T>,
) -> Result<(Mat<T>, CellState<T>, CellCache<T>)> {
    expect_kind(params, CellKind::GcrnM1)?;
    let (s, c) = params.step(Some(lap), x, state)?;
    Ok((s.h.clone(), s, c))
}

/// LSTM step with every input and recurrent map a graph convolution.
pub fn gclstm_m2_step<T: Scalar>(
    params: &CellParams<T>,
    lap: &SparseMatrix<T>,
    x: &Mat<T>,
    state: &CellState<T>,
) -> Result<(Mat<T>, CellState<T>, CellCache<T>)> {
    expect_kind(params, CellKind::GcLstmM2)?;
    let (s, c) = params.step(Some(lap), x, state)?;
    Ok((s.h.clone(), s, c))
}

pub fn gcrnn_step<T: Scalar>(
    params: &CellParams<T>,
    lap: &SparseMatrix<T>,
    x: &Mat<T>,
    h_prev: &Mat<T>,
) -> Result<(Mat<T>, CellCache<T>)> {
    expect_kind(params, CellKind::GcRnn)?;
    let state = CellState { h: h_prev.clone(), c: None };
    let (s, c) = params.step(Some(lap), x, &state)?;
    Ok((s.h, c))
}

pub fn gcgru_step<T: Scalar>(
    params: &CellParams<T>,
    lap: &SparseMatrix<T>,
    x: &Mat<T>,
    h_prev: &Mat<T>,
) -> Result<(Mat<T>, CellCache<T>)> {
    expect_kind(params, CellKind::GcGru)?;
    let state = CellState { h: h_prev.clone(), c: None };
    let (s, c) = params.step(Some(lap), x, &state)?;
    Ok((s.h, c))
}

/// Single-step adjoint for any cell kind; see [`CellParams::backward`].
pub fn cell_backward<T: Scalar>(
    kind: CellKind,
    params: &CellParams<T>,
    lap: Option<&SparseMatrix<T>>,
    cache: &CellCache<T>,
    d_h: &Mat<T>,
    d_next: Option<&CellState<T>>,
    grads: &mut CellParams<T>,
) -> Result<(Mat<T>, CellState<T>)> {
    expect_kind(params, kind)?;
    params.backward(lap, cache, d_h, d_next, grads)
}

#[cfg(test)]
mod tests;
