//! Losses and perplexity.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Clamp of predicted probabilities before taking logarithms.
pub const BCE_EPS: f64 = 1e-12;

/// Summed binary cross-entropy and its gradient with respect to `pred`.
/// The gradient is exact for the clamped form, so it vanishes where `pred` is clamped.
pub(crate) fn bce_sum<T: Scalar>(pred: &[T], target: &[T], grad: &mut [T]) -> Result<T> {
    let eps = T::of(BCE_EPS);
    let one = T::one();
    let mut total = T::zero();
    for ((&p, &t), g) in pred.iter().zip(target).zip(grad.iter_mut()) {
        if !(t >= T::zero() && t <= one) {
            return Err(Error::invalid(format!("target {t} outside [0, 1]")));
        }
        let q = p.max(eps).min(one - eps);
        total = total - (t * q.ln() + (one - t) * (one - q).ln());
        *g = if q == p { (one - t) / (one - q) - t / q } else { T::zero() };
    }
    Ok(total)
}

/// Mean binary cross-entropy over all elements, with `pred` clamped to
/// `[ε, 1 - ε]`. Returns the loss and its gradient with respect to `pred`.
pub fn binary_cross_entropy<T: Scalar>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    if pred.len() != target.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut grad = vec![T::zero(); pred.len()];
    let total = bce_sum(pred, target, &mut grad)?;
    if pred.is_empty() {
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::of(pred.len() as f64);
    grad.iter_mut().for_each(|g| *g = *g * inv);
    Ok((total * inv, grad))
}

/// Negative log-likelihood of `target` under `softmax(logits)`; `grad` receives
/// `softmax(logits) - one_hot(target)`.
pub(crate) fn softmax_nll<T: Scalar>(logits: &[T], target: usize, grad: &mut [T]) -> Result<T> {
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target class {target} out of range for {} classes",
            logits.len()
        )));
    }
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (g, &l) in grad.iter_mut().zip(logits) {
        *g = (l - m).exp();
        z = z + *g;
    }
    let inv = T::one() / z;
    grad.iter_mut().for_each(|g| *g = *g * inv);
    grad[target] = grad[target] - T::one();
    Ok(z.ln() + m - logits[target])
}

/// Mean softmax cross-entropy over positions. `logits` holds one row of
/// `n_classes` values per position. Returns the loss and its gradient.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &[T],
    n_classes: usize,
    targets: &[usize],
) -> Result<(T, Vec<T>)> {
    if n_classes == 0 || logits.len() != n_classes * targets.len() {
        return Err(Error::dim(format!(
            "{} logits do not form {} rows of {n_classes}",
            logits.len(),
            targets.len()
        )));
    }
    if let Some(l) = logits.iter().find(|l| !l.is_finite()) {
        return Err(Error::invalid(format!("non-finite logit {l}")));
    }
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (p, &t) in targets.iter().enumerate() {
        let r = p * n_classes..(p + 1) * n_classes;
        total = total + softmax_nll(&logits[r.clone()], t, &mut grad[r])?;
    }
    if targets.is_empty() {
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::of(targets.len() as f64);
    grad.iter_mut().for_each(|g| *g = *g * inv);
    Ok((total * inv, grad))
}

/// `exp(mean_nll)`.
pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rel_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_perfect_and_uninformative() {
        let t = [0.0, 1.0, 1.0, 0.0];
        let (l, _) = binary_cross_entropy(&t, &t).unwrap();
        assert!(l <= 1e-11, "{l}");
        let (l, _) = binary_cross_entropy(&[0.5; 4], &[0.0, 0.3, 1.0, 0.9]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert!(binary_cross_entropy(&[0.5], &[1.5]).is_err());
        assert!(binary_cross_entropy(&[0.5], &[f64::NAN]).is_err());
    }

    #[test]
    fn bce_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..0.95)).collect();
        let t: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let (_, g) = binary_cross_entropy(&p, &t).unwrap();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut a = p.clone();
            a[i] += h;
            let mut b = p.clone();
            b[i] -= h;
            let num = (binary_cross_entropy(&a, &t).unwrap().0 - binary_cross_entropy(&b, &t).unwrap().0) / (2.0 * h);
            assert!(rel_error(g[i], num) <= 1e-6, "{i}: {} vs {num}", g[i]);
        }
    }

    #[test]
    fn clamped_entries_have_zero_gradient() {
        let (l, g) = binary_cross_entropy(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((l / -BCE_EPS.ln() - 1.0).abs() < 1e-3);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        for v in [2, 7, 100] {
            let (l, _) = softmax_cross_entropy(&vec![0.3; v], v, &[v - 1]).unwrap();
            assert!((l - (v as f64).ln()).abs() < 1e-12);
        }
        let mut logits = vec![0.0; 5];
        logits[2] = 30.0;
        let (l, _) = softmax_cross_entropy(&logits, 5, &[2]).unwrap();
        assert!(l < 1e-12, "{l}");
        logits[2] = 20.0;
        assert!(softmax_cross_entropy(&logits, 5, &[2]).unwrap().0 > l);
        assert!(softmax_cross_entropy(&logits, 5, &[5]).is_err());
        assert!(softmax_cross_entropy(&[f64::INFINITY, 0.0], 2, &[0]).is_err());
    }

    #[test]
    fn softmax_large_logits_stable() {
        let (l, g) = softmax_cross_entropy(&[1000.0, 999.0], 2, &[1]).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln() - 1.0).abs() < 1e-12);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits: Vec<f64> = (0..15).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets = [1, 4, 0];
        let (_, g) = softmax_cross_entropy(&logits, 5, &targets).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut a = logits.clone();
            a[i] += h;
            let mut b = logits.clone();
            b[i] -= h;
            let f = |x: &[f64]| softmax_cross_entropy(x, 5, &targets).unwrap().0;
            let num = (f(&a) - f(&b)) / (2.0 * h);
            assert!(rel_error(g[i], num) <= 1e-6, "{i}");
        }
        for row in g.chunks(5) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn perplexity_values() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(2f64.ln()) - 2.0).abs() < 1e-15);
        assert!((perplexity(10_000f64.ln()) - 10_000.0).abs() < 1e-9);
    }
}
