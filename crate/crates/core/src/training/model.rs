//! Stacked recurrent cells with a readout head, trained by backpropagation through time.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cells::{cell_init, CellCache, CellParams, CellSpec, CellState};
use crate::chebyshev::{cheb_basis, ChebFilterBank};
use crate::data::{SequenceBatch, Targets};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::SparseMatrix;
use crate::tensor::Mat;

use super::loss::{bce_sum, softmax_nll};

/// Output head on top of the last cell layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Readout {
    /// Per-vertex dense map `d_h -> d_x` followed by a sigmoid; trained with BCE.
    Sigmoid,
    /// Sum over vertices, then a dense map `d_h -> vocab` to logits.
    Pooled { vocab: usize },
    /// Per-vertex dense map `d_h -> 1`; vertex `v` holds the logit of token `v`.
    Vertex,
}

impl Readout {
    pub fn is_token(self) -> bool {
        !matches!(self, Readout::Sigmoid)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Readout::Sigmoid => "sigmoid",
            Readout::Pooled { .. } => "pooled",
            Readout::Vertex => "vertex",
        }
    }
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parses `sigmoid`, `vertex` or `pooled`; `vocab` fills in the pooled width.
pub fn parse_readout(s: &str, vocab: usize) -> Result<Readout> {
    match s {
        "sigmoid" => Ok(Readout::Sigmoid),
        "vertex" => Ok(Readout::Vertex),
        "pooled" => Ok(Readout::Pooled { vocab }),
        _ => Err(Error::invalid(format!("unknown readout `{s}` (sigmoid | pooled | vertex)"))),
    }
}

impl FromStr for Readout {
    type Err = Error;

    /// `pooled` needs a width; use `pooled:<vocab>` or [`parse_readout`].
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("pooled", v)) => {
                let vocab = v.parse().map_err(|_| Error::invalid(format!("invalid vocabulary `{v}`")))?;
                Ok(Readout::Pooled { vocab })
            }
            _ => parse_readout(s, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    /// Spec of the first layer; deeper layers take `d_h` channels in.
    pub cell: CellSpec,
    pub layers: usize,
    pub readout: Readout,
}

impl ModelSpec {
    pub fn new(cell: CellSpec, readout: Readout) -> Self {
        Self { cell, layers: 1, readout }
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.cell.validate()?;
        if self.layers == 0 {
            return Err(Error::invalid("model needs at least one layer"));
        }
        if self.readout == (Readout::Pooled { vocab: 0 }) {
            return Err(Error::invalid("pooled readout needs a vocabulary of at least 1"));
        }
        Ok(())
    }

    pub fn layer_spec(&self, layer: usize) -> CellSpec {
        if layer == 0 {
            self.cell
        } else {
            CellSpec {
                d_x: self.cell.d_h,
                ..self.cell
            }
        }
    }

    /// Output width of the readout map.
    pub fn readout_width(&self) -> usize {
        match self.readout {
            Readout::Sigmoid => self.cell.d_x,
            Readout::Pooled { vocab } => vocab,
            Readout::Vertex => 1,
        }
    }

    /// Number of token classes, `None` for frame prediction.
    pub fn classes(&self) -> Option<usize> {
        match self.readout {
            Readout::Sigmoid => None,
            Readout::Pooled { vocab } => Some(vocab),
            Readout::Vertex => Some(self.cell.n),
        }
    }
}

/// All trainable tensors of a model. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    layers: Vec<CellParams<T>>,
    readout_w: ChebFilterBank<T>,
    readout_b: Vec<T>,
}

const READOUT_STREAM: u64 = 0x7265_6164;

impl<T: Scalar> Model<T> {
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layers = (0..spec.layers)
            .map(|l| CellParams::zeros(spec.layer_spec(l)))
            .collect::<Result<_>>()?;
        let w = spec.readout_width();
        Ok(Self {
            spec,
            layers,
            readout_w: ChebFilterBank::zeros(1, spec.cell.d_h, w),
            readout_b: vec![T::zero(); w],
        })
    }

    /// Layer `l` uses `cell_init` with seed `seed + l`; the readout map is
    /// Glorot-uniform from its own stream (divided by `n` for the pooled head) and
    /// its bias starts at zero.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(spec)?;
        for (l, layer) in m.layers.iter_mut().enumerate() {
            *layer = cell_init(spec.layer_spec(l), seed.wrapping_add(l as u64))?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(READOUT_STREAM);
        m.readout_w = ChebFilterBank::glorot(1, spec.cell.d_h, spec.readout_width(), &mut rng);
        if let Readout::Pooled { .. } = spec.readout {
            // Sum-pooling multiplies the input scale by n; this keeps initial logits O(1).
            let s = T::one() / T::of(spec.cell.n as f64);
            for w in m.readout_w.coeffs_mut() {
                *w = *w * s;
            }
        }
        Ok(m)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.spec).expect("spec already validated")
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[CellParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CellParams<T>] {
        &mut self.layers
    }

    pub fn readout_weights(&self) -> &ChebFilterBank<T> {
        &self.readout_w
    }

    pub fn readout_bias(&self) -> &[T] {
        &self.readout_b
    }

    /// Named tensors with their shapes; layer tensors are prefixed `l<i>.`.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.layout().into_iter().map(|(n, s)| (format!("l{l}.{n}"), s)));
        }
        out.push(("readout.w".into(), vec![self.readout_w.d_in(), self.readout_w.d_out()]));
        out.push(("readout.b".into(), vec![self.readout_b.len()]));
        out
    }

    pub fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = self.layers.iter().flat_map(|l| l.slices()).collect();
        out.push(self.readout_w.coeffs());
        out.push(&self.readout_b);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = self.layers.iter_mut().flat_map(|l| l.slices_mut()).collect();
        out.push(self.readout_w.coeffs_mut());
        out.push(&mut self.readout_b);
        out
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in self.slices_mut() {
            a.iter_mut().for_each(|x| *x = *x * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::zeros(self.spec).expect("spec already validated");
        for (a, b) in out.slices_mut().into_iter().zip(self.slices()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = U::of(y.to_f64_lossy());
            }
        }
        out
    }

    fn readout_input(&self, h: &Mat<T>) -> Mat<T> {
        match self.spec.readout {
            Readout::Pooled { .. } => {
                let mut p = Mat::zeros(1, h.cols());
                for v in 0..h.rows() {
                    for (a, &b) in p.row_mut(0).iter_mut().zip(h.row(v)) {
                        *a = *a + b;
                    }
                }
                p
            }
            _ => h.clone(),
        }
    }

    /// Readout pre-activations: `n x d_x` (sigmoid), `1 x V` (pooled) or `n x 1` (vertex).
    pub fn readout_forward(&self, h: &Mat<T>) -> Result<Mat<T>> {
        let cache = cheb_basis(None, &self.readout_input(h), 1)?;
        let mut z = self.readout_w.apply(&cache)?;
        for v in 0..z.rows() {
            for (a, &b) in z.row_mut(v).iter_mut().zip(&self.readout_b) {
                *a = *a + b;
            }
        }
        Ok(z)
    }

    fn readout_backward(&self, h: &Mat<T>, dz: &Mat<T>, grads: &mut Model<T>) -> Result<Mat<T>> {
        let cache = cheb_basis(None, &self.readout_input(h), 1)?;
        let mut d_in = cache.zeros_like();
        self.readout_w
            .backward(&cache, dz, grads.readout_w.coeffs_mut(), Some(&mut d_in))?;
        for v in 0..dz.rows() {
            for (a, &b) in grads.readout_b.iter_mut().zip(dz.row(v)) {
                *a = *a + b;
            }
        }
        let d_in = d_in.swap_remove(0);
        Ok(match self.spec.readout {
            Readout::Pooled { .. } => Mat::from_fn(h.rows(), h.cols(), |_, c| d_in[(0, c)]),
            _ => d_in,
        })
    }

    /// Summed loss of one step and its gradient with respect to the pre-activations.
    fn step_loss(&self, z: &Mat<T>, target: StepTarget<'_, T>) -> Result<(T, Mat<T>)> {
        let mut dz = Mat::zeros(z.rows(), z.cols());
        let loss = match target {
            StepTarget::Frame(t) => {
                if t.shape() != z.shape() {
                    return Err(Error::dim("frame target does not match the readout output"));
                }
                let p = z.map(T::sigmoid);
                let loss = bce_sum(p.as_slice(), t.as_slice(), dz.as_mut_slice())?;
                for (d, &q) in dz.as_mut_slice().iter_mut().zip(p.as_slice()) {
                    *d = *d * q * (T::one() - q);
                }
                loss
            }
            StepTarget::Token(id) => softmax_nll(z.as_slice(), id, dz.as_mut_slice())?,
        };
        Ok((loss, dz))
    }

    /// Prediction fed back as the next input during autoregressive rollout:
    /// sigmoid probabilities, or the one-hot signal of the most likely token.
    pub fn feedback(&self, z: &Mat<T>) -> Mat<T> {
        match self.spec.readout {
            Readout::Sigmoid => z.map(T::sigmoid),
            _ => {
                let s = z.as_slice();
                let best = (0..s.len()).fold(0, |b, i| if s[i] > s[b] { i } else { b });
                let mut m = Mat::zeros(self.spec.cell.n, 1);
                if best < m.rows() {
                    m[(best, 0)] = T::one();
                }
                m
            }
        }
    }

    /// Runs every layer one step, replacing `states`. Applies the input masks when given.
    fn advance(
        &self,
        lap: Option<&SparseMatrix<T>>,
        x: &Mat<T>,
        states: &mut [CellState<T>],
        in_masks: Option<&[Mat<T>]>,
    ) -> Result<(Mat<T>, Vec<CellCache<T>>)> {
        let mut x = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(m) = in_masks {
                x = x.zip_map(&m[l], |a, b| a * b);
            }
            let (s, c) = layer.step(lap, &x, &states[l])?;
            x = s.h.clone();
            states[l] = s;
            caches.push(c);
        }
        Ok((x, caches))
    }

    fn initial_states(&self) -> Vec<CellState<T>> {
        (0..self.spec.layers)
            .map(|l| CellState::zeros(&self.spec.layer_spec(l)))
            .collect()
    }

    /// Teacher-forced pass over one sequence. Adds parameter gradients of the summed
    /// loss into `grads` when given and returns the summed loss.
    fn run_element(
        &self,
        lap: Option<&SparseMatrix<T>>,
        elem: &Element<'_, T>,
        masks: Option<&Masks<T>>,
        mut grads: Option<&mut Model<T>>,
    ) -> Result<T> {
        let mut states = self.initial_states();
        let mut loss = T::zero();
        let mut records = Vec::new();
        for t in 0..elem.inputs.len() {
            let (mut top, caches) = self.advance(lap, elem.inputs[t], &mut states, masks.map(|m| &m.inputs[t][..]))?;
            if let Some(m) = masks {
                top = top.zip_map(&m.outputs[t], |a, b| a * b);
            }
            let z = self.readout_forward(&top)?;
            let (lt, dz) = self.step_loss(&z, elem.target(t))?;
            if !lt.is_finite() {
                return Err(Error::NonFiniteLoss { step: t });
            }
            loss = loss + lt;
            if grads.is_some() {
                records.push((caches, top, dz));
            }
        }
        let Some(grads) = grads.as_deref_mut() else {
            return Ok(loss);
        };
        let mut d_state: Vec<Option<CellState<T>>> = vec![None; self.layers.len()];
        for t in (0..records.len()).rev() {
            let (caches, top, dz) = records.pop().expect("one record per step");
            let mut dh = self.readout_backward(&top, &dz, grads)?;
            if let Some(m) = masks {
                dh = dh.zip_map(&m.outputs[t], |a, b| a * b);
            }
            for l in (0..self.layers.len()).rev() {
                let (dx, dprev) =
                    self.layers[l].backward(lap, &caches[l], &dh, d_state[l].as_ref(), &mut grads.layers[l])?;
                d_state[l] = Some(dprev);
                dh = dx;
                if let Some(m) = masks {
                    dh = dh.zip_map(&m.inputs[t][l], |a, b| a * b);
                }
            }
        }
        Ok(loss)
    }

    /// Summed loss per rollout horizon `1..=k` and the matching target counts.
    /// Horizon 1 is the teacher-forced loss of every step.
    fn rollout_element(
        &self,
        lap: Option<&SparseMatrix<T>>,
        elem: &Element<'_, T>,
        k: usize,
    ) -> Result<(Vec<T>, Vec<usize>)> {
        let mut sums = vec![T::zero(); k];
        let mut counts = vec![0usize; k];
        let mut states = self.initial_states();
        let steps = elem.inputs.len();
        for t in 0..steps {
            let (top, _) = self.advance(lap, elem.inputs[t], &mut states, None)?;
            let z = self.readout_forward(&top)?;
            let (lt, _) = self.step_loss(&z, elem.target(t))?;
            if !lt.is_finite() {
                return Err(Error::NonFiniteLoss { step: t });
            }
            sums[0] = sums[0] + lt;
            counts[0] += elem.target_size(t);
            let mut branch = states.clone();
            let mut pred = self.feedback(&z);
            for j in 1..k {
                if t + j >= steps {
                    break;
                }
                let (top, _) = self.advance(lap, &pred, &mut branch, None)?;
                let z = self.readout_forward(&top)?;
                let (lj, _) = self.step_loss(&z, elem.target(t + j))?;
                sums[j] = sums[j] + lj;
                counts[j] += elem.target_size(t + j);
                pred = self.feedback(&z);
            }
        }
        Ok((sums, counts))
    }

    /// Checks that a batch has the shapes and target kind this model expects.
    pub fn check_batch(&self, batch: &SequenceBatch<T>) -> Result<()> {
        let c = &self.spec.cell;
        let b = batch.batch_size();
        if batch.inputs.iter().any(|s| s.len() != b) {
            return Err(Error::dim("ragged batch"));
        }
        if let Some(x) = batch.inputs.iter().flatten().find(|x| x.shape() != (c.n, c.d_x)) {
            return Err(Error::dim(format!(
                "input frame is {}x{}, model expects {}x{}",
                x.rows(),
                x.cols(),
                c.n,
                c.d_x
            )));
        }
        match (&batch.targets, self.spec.classes()) {
            (Targets::Frames(f), None) => {
                if f.len() != batch.steps() || f.iter().any(|s| s.len() != b) {
                    return Err(Error::dim("frame targets do not match the inputs"));
                }
                if f.iter().flatten().any(|t| t.shape() != (c.n, c.d_x)) {
                    return Err(Error::dim("frame target shape does not match the model"));
                }
            }
            (Targets::Tokens(ids), Some(classes)) => {
                if ids.len() != batch.steps() || ids.iter().any(|s| s.len() != b) {
                    return Err(Error::dim("token targets do not match the inputs"));
                }
                if let Some(id) = ids.iter().flatten().find(|&&id| id >= classes) {
                    return Err(Error::invalid(format!("token {id} out of range for {classes} classes")));
                }
            }
            (Targets::Frames(_), Some(_)) => {
                return Err(Error::invalid(format!("{} readout needs token targets", self.spec.readout)))
            }
            (Targets::Tokens(_), None) => return Err(Error::invalid("sigmoid readout needs frame targets")),
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum StepTarget<'a, T> {
    Frame(&'a Mat<T>),
    Token(usize),
}

/// One batch element: its inputs and targets across time.
struct Element<'a, T> {
    inputs: Vec<&'a Mat<T>>,
    frames: Vec<&'a Mat<T>>,
    tokens: Vec<usize>,
}

impl<'a, T: Scalar> Element<'a, T> {
    fn of(batch: &'a SequenceBatch<T>, b: usize) -> Self {
        let inputs = batch.inputs.iter().map(|s| &s[b]).collect();
        match &batch.targets {
            Targets::Frames(f) => Self {
                inputs,
                frames: f.iter().map(|s| &s[b]).collect(),
                tokens: Vec::new(),
            },
            Targets::Tokens(ids) => Self {
                inputs,
                frames: Vec::new(),
                tokens: ids.iter().map(|s| s[b]).collect(),
            },
        }
    }

    fn target(&self, t: usize) -> StepTarget<'a, T> {
        if self.frames.is_empty() {
            StepTarget::Token(self.tokens[t])
        } else {
            StepTarget::Frame(self.frames[t])
        }
    }

    fn target_size(&self, t: usize) -> usize {
        if self.frames.is_empty() {
            1
        } else {
            self.frames[t].as_slice().len()
        }
    }
}

/// Inverted dropout on non-recurrent paths: each layer input and the top output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub keep: f64,
    pub seed: u64,
}

struct Masks<T> {
    /// `[t][layer]`, shaped like the layer input.
    inputs: Vec<Vec<Mat<T>>>,
    /// `[t]`, shaped like the top hidden state.
    outputs: Vec<Mat<T>>,
}

/// Bernoulli(`keep`) mask scaled by `1 / keep`.
pub fn dropout_mask<T: Scalar>(rows: usize, cols: usize, keep: f64, rng: &mut impl Rng) -> Mat<T> {
    if keep >= 1.0 {
        return Mat::from_fn(rows, cols, |_, _| T::one());
    }
    let scale = T::of(1.0 / keep);
    Mat::from_fn(rows, cols, |_, _| if rng.gen_bool(keep) { scale } else { T::zero() })
}

/// `x ⊙ m / keep` with `m ~ Bernoulli(keep)`; the identity when `keep = 1`.
pub fn dropout_apply<T: Scalar>(x: &Mat<T>, keep: f64, rng: &mut impl Rng) -> Result<Mat<T>> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::invalid(format!("keep probability {keep} outside (0, 1]")));
    }
    if keep == 1.0 {
        return Ok(x.clone());
    }
    let m = dropout_mask(x.rows(), x.cols(), keep, rng);
    Ok(x.zip_map(&m, |a, b| a * b))
}

fn make_masks<T: Scalar>(spec: &ModelSpec, steps: usize, keep: f64, rng: &mut impl Rng) -> Masks<T> {
    let n = spec.cell.n;
    let mut inputs = Vec::with_capacity(steps);
    let mut outputs = Vec::with_capacity(steps);
    for _ in 0..steps {
        inputs.push(
            (0..spec.layers)
                .map(|l| dropout_mask(n, spec.layer_spec(l).d_x, keep, rng))
                .collect(),
        );
        outputs.push(dropout_mask(n, spec.cell.d_h, keep, rng));
    }
    Masks { inputs, outputs }
}

/// Backpropagation through time over a batch with teacher forcing.
///
/// Returns `loss_weight` times the mean loss over all targets, with the exact
/// gradient of that quantity. Batch elements run in parallel; their results are
/// reduced in element order so the outcome does not depend on the thread count.
/// Element `b` draws its dropout masks from stream `b` of the seeded generator.
pub fn bptt<T: Scalar>(
    model: &Model<T>,
    lap: Option<&SparseMatrix<T>>,
    batch: &SequenceBatch<T>,
    dropout: Option<Dropout>,
    loss_weight: T,
) -> Result<(T, Model<T>)> {
    model.check_batch(batch)?;
    if let Some(d) = dropout {
        if !(d.keep > 0.0 && d.keep <= 1.0) {
            return Err(Error::invalid(format!("keep probability {} outside (0, 1]", d.keep)));
        }
    }
    let dropout = dropout.filter(|d| d.keep < 1.0);
    let results: Vec<Result<(T, Model<T>)>> = (0..batch.batch_size())
        .into_par_iter()
        .map(|b| {
            let masks = dropout.map(|d| {
                let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
                rng.set_stream(b as u64);
                make_masks(&model.spec, batch.steps(), d.keep, &mut rng)
            });
            let mut g = model.zeros_like();
            let l = model.run_element(lap, &Element::of(batch, b), masks.as_ref(), Some(&mut g))?;
            Ok((l, g))
        })
        .collect();
    let mut loss = T::zero();
    let mut grads = model.zeros_like();
    for r in results {
        let (l, g) = r?;
        loss = loss + l;
        grads.accumulate(&g);
    }
    let count = batch.target_count();
    if count == 0 {
        return Ok((T::zero(), grads));
    }
    let scale = loss_weight / T::of(count as f64);
    grads.scale(scale);
    Ok((loss * scale, grads))
}

/// Mean loss per rollout horizon over all batches: entry `j` is the loss of
/// predictions made `j + 1` steps after the last observed input, feeding each
/// prediction back as the next input. Entry 0 is the teacher-forced loss.
pub fn rollout_losses<T: Scalar>(
    model: &Model<T>,
    lap: Option<&SparseMatrix<T>>,
    batches: &[SequenceBatch<T>],
    k: usize,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::invalid("rollout horizon must be at least 1"));
    }
    for b in batches {
        model.check_batch(b)?;
    }
    let jobs: Vec<(usize, usize)> = batches
        .iter()
        .enumerate()
        .flat_map(|(i, b)| (0..b.batch_size()).map(move |e| (i, e)))
        .collect();
    let results: Vec<Result<(Vec<T>, Vec<usize>)>> = jobs
        .par_iter()
        .map(|&(i, e)| model.rollout_element(lap, &Element::of(&batches[i], e), k))
        .collect();
    let mut sums = vec![T::zero(); k];
    let mut counts = vec![0usize; k];
    for r in results {
        let (s, c) = r?;
        for j in 0..k {
            sums[j] = sums[j] + s[j];
            counts[j] += c[j];
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { f64::NAN } else { s.to_f64_lossy() / c as f64 })
        .collect())
}

/// Teacher-forced mean loss over all targets of all batches, dropout off.
pub fn evaluate<T: Scalar>(model: &Model<T>, lap: Option<&SparseMatrix<T>>, batches: &[SequenceBatch<T>]) -> Result<f64> {
    Ok(rollout_losses(model, lap, batches, 1)?[0])
}

/// The value [`bptt`] differentiates, computed sequentially without gradients.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    lap: Option<&SparseMatrix<T>>,
    batch: &SequenceBatch<T>,
    dropout: Option<Dropout>,
    loss_weight: T,
) -> Result<T> {
    model.check_batch(batch)?;
    let dropout = dropout.filter(|d| d.keep < 1.0);
    let mut loss = T::zero();
    for b in 0..batch.batch_size() {
        let masks = dropout.map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
            rng.set_stream(b as u64);
            make_masks(&model.spec, batch.steps(), d.keep, &mut rng)
        });
        loss = loss + model.run_element(lap, &Element::of(batch, b), masks.as_ref(), None)?;
    }
    let count = batch.target_count().max(1);
    Ok(loss * loss_weight / T::of(count as f64))
}
