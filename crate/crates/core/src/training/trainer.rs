//! Epoch loop with early stopping and per-epoch metrics.

use std::time::Instant;

use crate::data::{make_batches, Dataset};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::SparseMatrix;

use super::loss::perplexity;
use super::model::{bptt, evaluate, Dropout, Model, ModelSpec, Readout};
use super::optim::{OptimizerConfig, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub unroll: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_keep: f64,
    pub patience: usize,
    pub seed: u64,
    /// Reports zero wall time so that metrics files are reproducible byte for byte.
    pub deterministic: bool,
    /// Stops after this many optimizer steps, finishing the epoch's metrics.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            unroll: 20,
            batch_size: 20,
            epochs: 10,
            dropout_keep: 0.75,
            patience: 3,
            seed: 0,
            deterministic: true,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unroll == 0 || self.batch_size == 0 {
            return Err(Error::invalid("unroll and batch_size must be at least 1"));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::invalid(format!("dropout keep {} outside (0, 1]", self.dropout_keep)));
        }
        Ok(())
    }
}

/// Tracks the best validation loss; stops once more than `patience` epochs
/// in a row failed to improve on it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            since_best: 0,
        }
    }

    /// Records an epoch's validation loss; true when it is a strict improvement.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best > self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
        }
    }
}

pub const METRICS_HEADER: &str = "epoch,split,loss,perplexity,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    /// Present for token tasks only.
    pub perplexity: Option<f64>,
    pub wall_ms: u64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let ppl = self.perplexity.map(|p| format!("{p:.16e}")).unwrap_or_default();
        format!(
            "{},{},{:.16e},{},{}",
            self.epoch,
            self.split.as_str(),
            self.loss,
            ppl,
            self.wall_ms
        )
    }
}

/// Everything needed to continue training: parameters, optimizer, counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Number of completed optimizer steps.
    pub step: usize,
    pub stopping: EarlyStopping,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>, optimizer: OptimizerConfig, patience: usize) -> Self {
        let shapes: Vec<usize> = model.slices().iter().map(|s| s.len()).collect();
        Self {
            optimizer: OptimizerState::new(optimizer, &shapes),
            model,
            epoch: 0,
            step: 0,
            stopping: EarlyStopping::new(patience),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    /// Parameters after the best validation epoch of this run, if any improved.
    pub best: Option<Model<T>>,
    pub history: Vec<EpochMetrics>,
    pub stopped_early: bool,
}

/// Rejects datasets whose signals or targets do not fit the model.
pub fn check_dataset(spec: &ModelSpec, data: &Dataset, what: &str) -> Result<()> {
    let c = &spec.cell;
    match (data, spec.readout) {
        (Dataset::Frames(d), Readout::Sigmoid) => {
            if (d.n, d.d) != (c.n, c.d_x) {
                return Err(Error::dim(format!(
                    "{what} frames are {}x{}, model expects {}x{}",
                    d.n, d.d, c.n, c.d_x
                )));
            }
        }
        (Dataset::Tokens(t), r) if r.is_token() => {
            if t.vocab != c.n || c.d_x != 1 {
                return Err(Error::dim(format!(
                    "{what} vocabulary {} needs a model with n = {0} vertices and d_x = 1, got n = {}, d_x = {}",
                    t.vocab, c.n, c.d_x
                )));
            }
            if spec.classes() != Some(t.vocab) {
                return Err(Error::dim(format!(
                    "{what} vocabulary {} does not match the readout width {:?}",
                    t.vocab,
                    spec.classes()
                )));
            }
        }
        (Dataset::Frames(_), _) => return Err(Error::invalid(format!("{what} holds frames, model predicts tokens"))),
        (Dataset::Tokens(_), _) => return Err(Error::invalid(format!("{what} holds tokens, model predicts frames"))),
    }
    Ok(())
}

fn mix(seed: u64, salt: u64, i: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_add(i.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trains from `state` until `cfg.epochs` epochs are complete, early stopping
/// triggers or `cfg.max_steps` is reached.
///
/// Each epoch shuffles the training windows, takes one optimizer step per batch
/// with dropout, then measures train and validation loss with dropout off.
/// `on_epoch` sees the state, that epoch's metric rows and whether validation improved.
pub fn train_loop<T: Scalar>(
    mut state: TrainState<T>,
    lap: Option<&SparseMatrix<T>>,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState<T>, &[EpochMetrics], bool) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    state.optimizer.config.validate()?;
    let spec = *state.model.spec();
    check_dataset(&spec, train, "training data")?;
    check_dataset(&spec, valid, "validation data")?;
    let train_eval = make_batches::<T>(train, cfg.batch_size, cfg.unroll, None)?;
    let valid_eval = make_batches::<T>(valid, cfg.batch_size, cfg.unroll, None)?;
    let tokens = spec.readout.is_token();

    let mut history = Vec::new();
    let mut best = None;
    let mut stopped_early = false;
    for epoch in state.epoch..cfg.epochs {
        if state.stopping.should_stop() {
            stopped_early = true;
            break;
        }
        if cfg.max_steps.is_some_and(|m| state.step >= m) {
            break;
        }
        let start = Instant::now();
        let batches = make_batches::<T>(train, cfg.batch_size, cfg.unroll, Some(mix(cfg.seed, 1, epoch as u64)))?;
        for batch in &batches {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                break;
            }
            let dropout = Dropout {
                keep: cfg.dropout_keep,
                seed: mix(cfg.seed, 2, state.step as u64),
            };
            let step = state.step;
            let (loss, grads) = bptt(&state.model, lap, batch, Some(dropout), T::one()).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step },
                e => e,
            })?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let g = grads.slices();
            state.optimizer.update(&mut state.model.slices_mut(), &g, epoch)?;
            state.step += 1;
        }
        let train_loss = evaluate(&state.model, lap, &train_eval)?;
        let valid_loss = evaluate(&state.model, lap, &valid_eval)?;
        if !train_loss.is_finite() || !(valid_loss.is_finite() || valid_eval.is_empty()) {
            return Err(Error::NonFiniteLoss { step: state.step });
        }
        let wall_ms = if cfg.deterministic {
            0
        } else {
            start.elapsed().as_millis() as u64
        };
        let row = |split, loss: f64| EpochMetrics {
            epoch,
            split,
            loss,
            perplexity: tokens.then(|| perplexity(loss)),
            wall_ms,
        };
        let rows = [row(Split::Train, train_loss), row(Split::Valid, valid_loss)];
        let improved = state.stopping.observe(epoch, valid_loss);
        state.epoch = epoch + 1;
        if improved {
            best = Some(state.model.clone());
        }
        on_epoch(&state, &rows, improved)?;
        history.extend(rows);
        if state.stopping.should_stop() {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        state,
        best,
        history,
        stopped_early,
    })
}
