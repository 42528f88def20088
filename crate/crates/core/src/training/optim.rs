//! RMSProp and clipped SGD with a step-decay schedule.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    RmsProp,
    ClippedSgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::ClippedSgd => "clipped_sgd",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "clipped_sgd" | "sgd" => Ok(OptimizerKind::ClippedSgd),
            _ => Err(Error::invalid(format!("unknown optimizer `{s}` (rmsprop | clipped_sgd)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// RMSProp moving-average decay.
    pub decay_rate: f64,
    pub epsilon: f64,
    /// Global gradient-norm bound of clipped SGD.
    pub max_grad_norm: f64,
    /// Clipped SGD uses `lr * lr_decay^max(0, epoch - lr_decay_start)`.
    pub lr_decay: f64,
    pub lr_decay_start: usize,
}

impl OptimizerConfig {
    pub fn rmsprop() -> Self {
        Self {
            kind: OptimizerKind::RmsProp,
            learning_rate: 1e-3,
            decay_rate: 0.9,
            epsilon: 1e-8,
            max_grad_norm: 5.0,
            lr_decay: 0.5,
            lr_decay_start: 4,
        }
    }

    pub fn clipped_sgd() -> Self {
        Self {
            kind: OptimizerKind::ClippedSgd,
            learning_rate: 1.0,
            ..Self::rmsprop()
        }
    }

    pub fn for_kind(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::RmsProp => Self::rmsprop(),
            OptimizerKind::ClippedSgd => Self::clipped_sgd(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.decay_rate)
            && self.epsilon > 0.0
            && self.max_grad_norm > 0.0
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("optimizer hyperparameters out of range"))
        }
    }

    /// Learning rate in effect during `epoch` (clipped SGD schedule).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.learning_rate, self.lr_decay, self.lr_decay_start, epoch)
    }
}

/// `base * decay^max(0, epoch - start)`.
pub fn lr_schedule(base: f64, decay: f64, start: usize, epoch: usize) -> f64 {
    base * decay.powi(epoch.saturating_sub(start) as i32)
}

/// Optimizer hyperparameters plus per-tensor accumulators mirroring the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    /// RMSProp second-moment averages; empty for clipped SGD.
    pub accumulators: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, shapes: &[usize]) -> Self {
        let accumulators = match config.kind {
            OptimizerKind::RmsProp => shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            OptimizerKind::ClippedSgd => Vec::new(),
        };
        Self { config, accumulators }
    }

    /// Applies the configured update rule.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[&[T]], epoch: usize) -> Result<()> {
        match self.config.kind {
            OptimizerKind::RmsProp => rmsprop_update(params, grads, self),
            OptimizerKind::ClippedSgd => clipped_sgd_update(params, grads, self, epoch).map(|_| ()),
        }
    }
}

fn check_shapes<T>(params: &[&mut [T]], grads: &[&[T]]) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::dim("gradients do not mirror the parameters"));
    }
    Ok(())
}

/// `acc ← ρ acc + (1 - ρ) g²`, `p ← p - lr g / sqrt(acc + ε)`.
pub fn rmsprop_update<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    check_shapes(params, grads)?;
    if state.accumulators.len() != grads.len()
        || state.accumulators.iter().zip(grads).any(|(a, g)| a.len() != g.len())
    {
        return Err(Error::dim("optimizer state does not mirror the parameters"));
    }
    let c = &state.config;
    let (rho, lr, eps) = (T::of(c.decay_rate), T::of(c.learning_rate), T::of(c.epsilon));
    let one_minus = T::one() - rho;
    for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut state.accumulators) {
        for ((p, &g), a) in p.iter_mut().zip(g.iter()).zip(acc.iter_mut()) {
            *a = rho * *a + one_minus * g * g;
            *p = *p - lr * g / (*a + eps).sqrt();
        }
    }
    Ok(())
}

/// Euclidean norm over all tensors jointly.
pub fn global_norm<T: Scalar>(grads: &[&[T]]) -> T {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .fold(T::zero(), |acc, &g| acc + g * g)
        .sqrt()
}

/// Scale factor bringing the global norm down to `max_norm` (1 when already within).
pub fn clip_factor<T: Scalar>(grads: &[&[T]], max_norm: T) -> T {
    let norm = global_norm(grads);
    if norm > max_norm {
        max_norm / norm
    } else {
        T::one()
    }
}

/// Clips the joint gradient norm to `max_grad_norm`, then steps with the scheduled
/// learning rate of `epoch`. Returns the scale applied to the gradients.
pub fn clipped_sgd_update<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut OptimizerState<T>,
    epoch: usize,
) -> Result<T> {
    check_shapes(params, grads)?;
    let c = &state.config;
    let scale = clip_factor(grads, T::of(c.max_grad_norm));
    let lr = T::of(c.lr_at(epoch));
    for (p, g) in params.iter_mut().zip(grads) {
        for (p, &g) in p.iter_mut().zip(g.iter()) {
            *p = *p - lr * (g * scale);
        }
    }
    Ok(scale)
}
