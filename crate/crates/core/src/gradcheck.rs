//! Central finite-difference checks of the analytic cell gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::{CellKind, CellParams, CellSpec, CellState, Peepholes};
use crate::data::{SequenceBatch, Targets};
use crate::error::Result;
use crate::graph::{Graph, LambdaMaxMode};
use crate::sparse::SparseMatrix;
use crate::tensor::Mat;
use crate::training::{batch_loss, bptt, Dropout, Model, ModelSpec, Readout};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Largest accepted relative error.
pub const REL_TOL: f64 = 1e-5;
/// Magnitude below which gradient errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub kind: CellKind,
    pub trials: usize,
    pub max_rel_error: f64,
    /// Description of the entry with the largest error.
    pub worst: String,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= REL_TOL
    }
}

/// A random small cell instance with a linear readout of the new state.
pub struct CellInstance {
    pub params: CellParams<f64>,
    pub lap: Option<SparseMatrix<f64>>,
    pub x: Mat<f64>,
    pub state: CellState<f64>,
    pub weight_h: Mat<f64>,
    pub weight_c: Option<Mat<f64>>,
}

fn uniform_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, a: f64) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

/// Random connected-ish graph on `n` vertices with positive weights.
pub fn random_scaled_laplacian(rng: &mut ChaCha8Rng, n: usize) -> Result<SparseMatrix<f64>> {
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push((rng.gen_range(0..i), i, rng.gen_range(0.2..1.5)));
    }
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(0.3) && !edges.iter().any(|&(a, b, _)| (a.min(b), a.max(b)) == (i, j)) {
                edges.push((i, j, rng.gen_range(0.2..1.5)));
            }
        }
    }
    let g = Graph::from_edges(n, &edges)?.with_lambda_mode(LambdaMaxMode::PowerIteration {
        tol: 1e-9,
        max_iter: 100_000,
    });
    Ok(g.scaled_laplacian()?.clone())
}

impl CellInstance {
    /// Draws sizes `n <= 6`, `d <= 3`, `K <= 3` and uniformly random tensors.
    pub fn random(kind: CellKind, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=6);
        let d_x = rng.gen_range(1..=3);
        let d_h = rng.gen_range(1..=3);
        let k = rng.gen_range(1..=3);
        let peepholes = [Peepholes::PerVertex, Peepholes::Shared, Peepholes::Disabled][rng.gen_range(0..3)];
        let spec = CellSpec::new(kind, n, d_x, d_h, k).with_peepholes(peepholes);
        let mut params = CellParams::zeros(spec)?;
        for s in params.slices_mut() {
            for v in s {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let lap = if kind.is_graph() {
            Some(random_scaled_laplacian(&mut rng, n)?)
        } else {
            None
        };
        let x = uniform_mat(&mut rng, n, d_x, 1.0);
        let state = CellState {
            h: uniform_mat(&mut rng, n, d_h, 0.9),
            c: kind.is_lstm().then(|| uniform_mat(&mut rng, n, d_h, 2.0)),
        };
        let weight_h = uniform_mat(&mut rng, n, d_h, 1.0);
        let weight_c = kind.is_lstm().then(|| uniform_mat(&mut rng, n, d_h, 1.0));
        Ok(Self {
            params,
            lap,
            x,
            state,
            weight_h,
            weight_c,
        })
    }

    /// Scalar objective `<W_h, h_t> + <W_c, c_t>`.
    pub fn loss(&self, params: &CellParams<f64>, x: &Mat<f64>, state: &CellState<f64>) -> Result<f64> {
        let (next, _) = params.step(self.lap.as_ref(), x, state)?;
        let mut l = self.weight_h.dot(&next.h);
        if let (Some(w), Some(c)) = (&self.weight_c, &next.c) {
            l += w.dot(c);
        }
        Ok(l)
    }

    /// Analytic gradients: parameters, input, previous hidden and cell state.
    pub fn analytic(&self) -> Result<(CellParams<f64>, Mat<f64>, CellState<f64>)> {
        let (_, cache) = self.params.step(self.lap.as_ref(), &self.x, &self.state)?;
        let mut grads = self.params.zeros_like();
        let d_next = CellState {
            h: Mat::zeros(self.weight_h.rows(), self.weight_h.cols()),
            c: self.weight_c.clone(),
        };
        let (dx, dprev) = self.params.backward(
            self.lap.as_ref(),
            &cache,
            &self.weight_h,
            Some(&d_next),
            &mut grads,
        )?;
        Ok((grads, dx, dprev))
    }
}

fn central<F: FnMut(f64) -> Result<f64>>(x0: f64, mut f: F) -> Result<f64> {
    let plus = f(x0 + FD_STEP)?;
    let minus = f(x0 - FD_STEP)?;
    Ok((plus - minus) / (2.0 * FD_STEP))
}

/// Runs one random trial and returns the worst relative error with its location.
/// With `corrupt` set the analytic gradient of the first parameter is perturbed.
pub fn cell_trial(kind: CellKind, seed: u64, corrupt: bool) -> Result<(f64, String)> {
    let inst = CellInstance::random(kind, seed)?;
    let (mut grads, dx, dprev) = inst.analytic()?;
    if corrupt {
        let g = &mut grads.slices_mut()[0][0];
        *g += 1e-2 * (1.0 + g.abs());
    }
    let mut worst = (0.0f64, String::new());
    let mut record = |err: f64, what: String| {
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, what);
        }
    };

    let layout = inst.params.layout();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    for (t, ((name, _), ga)) in layout.iter().zip(&analytic).enumerate() {
        for (e, &a) in ga.iter().enumerate() {
            let x0 = inst.params.slices()[t][e];
            let num = central(x0, |v| {
                let mut p = inst.params.clone();
                p.slices_mut()[t][e] = v;
                inst.loss(&p, &inst.x, &inst.state)
            })?;
            record(rel_error(a, num), format!("{kind} {name}[{e}]"));
        }
    }
    for e in 0..inst.x.as_slice().len() {
        let num = central(inst.x.as_slice()[e], |v| {
            let mut x = inst.x.clone();
            x.as_mut_slice()[e] = v;
            inst.loss(&inst.params, &x, &inst.state)
        })?;
        record(rel_error(dx.as_slice()[e], num), format!("{kind} x[{e}]"));
    }
    for e in 0..inst.state.h.as_slice().len() {
        let num = central(inst.state.h.as_slice()[e], |v| {
            let mut s = inst.state.clone();
            s.h.as_mut_slice()[e] = v;
            inst.loss(&inst.params, &inst.x, &s)
        })?;
        record(rel_error(dprev.h.as_slice()[e], num), format!("{kind} h_prev[{e}]"));
    }
    if let (Some(c0), Some(dc)) = (&inst.state.c, &dprev.c) {
        for e in 0..c0.as_slice().len() {
            let num = central(c0.as_slice()[e], |v| {
                let mut s = inst.state.clone();
                s.c.as_mut().expect("lstm state").as_mut_slice()[e] = v;
                inst.loss(&inst.params, &inst.x, &s)
            })?;
            record(rel_error(dc.as_slice()[e], num), format!("{kind} c_prev[{e}]"));
        }
    }
    Ok(worst)
}

/// Runs `trials` random trials for one cell kind, seeds `seed, seed + 1, …`.
pub fn gradcheck_cell(kind: CellKind, seed: u64, trials: usize, corrupt: bool) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        kind,
        trials,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for t in 0..trials {
        let (err, what) = cell_trial(kind, seed.wrapping_add(t as u64), corrupt)?;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = what;
        }
    }
    Ok(report)
}

/// A random small stacked model with a batch of sequences.
pub struct BpttInstance {
    pub model: Model<f64>,
    pub lap: Option<SparseMatrix<f64>>,
    pub batch: SequenceBatch<f64>,
    pub dropout: Option<Dropout>,
    pub loss_weight: f64,
}

impl BpttInstance {
    /// Draws `n <= 5`, up to two layers, `T <= 4`, `B <= 2`, any readout, and
    /// dropout half of the time.
    pub fn random(kind: CellKind, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6270_7474);
        let n = rng.gen_range(2..=5);
        let readout = [Readout::Sigmoid, Readout::Pooled { vocab: n }, Readout::Vertex][rng.gen_range(0..3)];
        let d_x = if readout.is_token() { 1 } else { rng.gen_range(1..=2) };
        let d_h = rng.gen_range(1..=3);
        let k = rng.gen_range(1..=3);
        let peepholes = [Peepholes::PerVertex, Peepholes::Shared, Peepholes::Disabled][rng.gen_range(0..3)];
        let cell = CellSpec::new(kind, n, d_x, d_h, k).with_peepholes(peepholes);
        let spec = ModelSpec::new(cell, readout).with_layers(rng.gen_range(1..=2));
        let mut model = Model::zeros(spec)?;
        for s in model.slices_mut() {
            for v in s {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let lap = if kind.is_graph() {
            Some(random_scaled_laplacian(&mut rng, n)?)
        } else {
            None
        };
        let steps = rng.gen_range(1..=4);
        let b = rng.gen_range(1..=2);
        let inputs: Vec<Vec<Mat<f64>>> = (0..steps)
            .map(|_| (0..b).map(|_| uniform_mat(&mut rng, n, d_x, 1.0)).collect())
            .collect();
        let targets = if readout.is_token() {
            Targets::Tokens((0..steps).map(|_| (0..b).map(|_| rng.gen_range(0..n)).collect()).collect())
        } else {
            Targets::Frames(
                (0..steps)
                    .map(|_| (0..b).map(|_| Mat::from_fn(n, d_x, |_, _| rng.gen_range(0.0..=1.0))).collect())
                    .collect(),
            )
        };
        let dropout = rng.gen_bool(0.5).then(|| Dropout {
            keep: 0.75,
            seed: rng.gen(),
        });
        Ok(Self {
            model,
            lap,
            batch: SequenceBatch { inputs, targets },
            dropout,
            loss_weight: rng.gen_range(0.5..2.0),
        })
    }

    pub fn loss(&self, model: &Model<f64>) -> Result<f64> {
        batch_loss(model, self.lap.as_ref(), &self.batch, self.dropout, self.loss_weight)
    }
}

/// End-to-end check of `bptt` over every parameter of a random model.
pub fn bptt_trial(kind: CellKind, seed: u64, corrupt: bool) -> Result<(f64, String)> {
    let inst = BpttInstance::random(kind, seed)?;
    let (_, mut grads) = bptt(&inst.model, inst.lap.as_ref(), &inst.batch, inst.dropout, inst.loss_weight)?;
    if corrupt {
        let g = &mut grads.slices_mut()[0][0];
        *g += 1e-2 * (1.0 + g.abs());
    }
    let mut worst = (0.0f64, String::new());
    let layout = inst.model.layout();
    for (t, ((name, _), ga)) in layout.iter().zip(grads.slices()).enumerate() {
        for (e, &a) in ga.iter().enumerate() {
            let x0 = inst.model.slices()[t][e];
            let num = central(x0, |v| {
                let mut m = inst.model.clone();
                m.slices_mut()[t][e] = v;
                inst.loss(&m)
            })?;
            let err = rel_error(a, num);
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, format!("{kind} bptt {name}[{e}]"));
            }
        }
    }
    Ok(worst)
}

/// `trials` single-step trials followed by `trials` end-to-end trials.
pub fn gradcheck_model(kind: CellKind, seed: u64, trials: usize, corrupt: bool) -> Result<GradcheckReport> {
    let mut report = gradcheck_cell(kind, seed, trials, corrupt)?;
    for t in 0..trials {
        let (err, what) = bptt_trial(kind, seed.wrapping_add(t as u64), corrupt)?;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = what;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_passes() {
        for kind in CellKind::ALL {
            let r = gradcheck_cell(kind, 42, 5, false).unwrap();
            assert!(r.passed(), "{kind}: {} at {}", r.max_rel_error, r.worst);
        }
    }

    #[test]
    fn corruption_is_detected() {
        for kind in CellKind::ALL {
            let r = gradcheck_cell(kind, 42, 2, true).unwrap();
            assert!(!r.passed(), "{kind} corruption went unnoticed");
        }
    }

    #[test]
    fn bptt_passes_and_detects_corruption() {
        for kind in CellKind::ALL {
            let r = gradcheck_model(kind, 7, 4, false).unwrap();
            assert!(r.passed(), "{kind}: {} at {}", r.max_rel_error, r.worst);
            let (err, _) = bptt_trial(kind, 7, true).unwrap();
            assert!(err > REL_TOL, "{kind}");
        }
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(1.0, 1.0), 0.0);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_error(1e-9, 0.0) - 1e-5).abs() < 1e-18);
    }
}
