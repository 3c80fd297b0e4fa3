//! Cross-entropy objectives and their logit gradients.

use super::TrainError;
use crate::grammar::Symbol;
use crate::model::Real;

/// Loss value, accuracy counts and the logit gradient of one batch.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Sum of per-target cross-entropies (not yet averaged).
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
    pub dlogits: Vec<T>,
}

impl<T> LossOutput<T> {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.count as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }
}

/// Cross-entropy of one logit row against `target`; writes
/// `scale * (softmax - onehot)` (with optional label smoothing) into `grad`.
/// Returns `(loss, argmax == target)`.
fn ce_row<T: Real>(
    row: &[T],
    target: usize,
    smoothing: f64,
    scale: T,
    grad: &mut [T],
) -> (f64, bool) {
    let n = row.len();
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut argmax = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[argmax] {
            argmax = i;
        }
    }
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    let on = 1.0 - smoothing;
    let off = smoothing / n as f64;
    let mut loss = 0.0;
    for (i, (&v, g)) in row.iter().zip(grad.iter_mut()).enumerate() {
        let logp = (v - log_z).to_f64().unwrap();
        let q = if i == target { on + off } else { off };
        if q > 0.0 {
            loss -= q * logp;
        }
        *g = scale * (T::from_f64(logp.exp() - q).unwrap());
    }
    (loss, argmax == target)
}

/// Masked-token cross-entropy over `batch × len × vocab` logits. Only the
/// listed `(position, symbol)` targets contribute. The gradient is scaled
/// by `scale`; pass `1 / total_targets` to get the gradient of the mean.
pub fn masked_loss_scaled<T: Real>(
    logits: &[T],
    len: usize,
    vocab: usize,
    targets: &[Vec<(usize, Symbol)>],
    scale: T,
) -> Result<LossOutput<T>, TrainError> {
    if logits.len() != targets.len() * len * vocab {
        return Err(TrainError::Shape(format!(
            "{} logits for {} examples of {len} x {vocab}",
            logits.len(),
            targets.len()
        )));
    }
    let mut dlogits = vec![T::zero(); logits.len()];
    let mut out = LossOutput {
        loss_sum: 0.0,
        correct: 0,
        count: 0,
        dlogits: Vec::new(),
    };
    for (b, ts) in targets.iter().enumerate() {
        for &(pos, sym) in ts {
            if pos >= len || sym as usize >= vocab {
                return Err(TrainError::Shape(format!(
                    "target ({pos}, {sym}) out of range"
                )));
            }
            let off = (b * len + pos) * vocab;
            let (l, hit) = ce_row(
                &logits[off..off + vocab],
                sym as usize,
                0.0,
                scale,
                &mut dlogits[off..off + vocab],
            );
            out.loss_sum += l;
            out.correct += usize::from(hit);
            out.count += 1;
        }
    }
    if out.count == 0 {
        return Err(TrainError::EmptyTargets);
    }
    out.dlogits = dlogits;
    Ok(out)
}

/// Mean masked-token cross-entropy and masked accuracy.
pub fn masked_loss<T: Real>(
    logits: &[T],
    len: usize,
    vocab: usize,
    targets: &[Vec<(usize, Symbol)>],
) -> Result<LossOutput<T>, TrainError> {
    let count: usize = targets.iter().map(Vec::len).sum();
    if count == 0 {
        return Err(TrainError::EmptyTargets);
    }
    masked_loss_scaled(
        logits,
        len,
        vocab,
        targets,
        T::one() / T::from_usize(count).unwrap(),
    )
}

/// Classification cross-entropy over `batch × classes` logits.
pub fn class_loss_scaled<T: Real>(
    logits: &[T],
    classes: usize,
    labels: &[usize],
    smoothing: f64,
    scale: T,
) -> Result<LossOutput<T>, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::EmptyTargets);
    }
    if logits.len() != labels.len() * classes {
        return Err(TrainError::Shape(format!(
            "{} logits for {} labels of {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    let mut dlogits = vec![T::zero(); logits.len()];
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for (b, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(TrainError::Shape(format!("label {y} out of range")));
        }
        let r = b * classes..(b + 1) * classes;
        let (l, hit) = ce_row(&logits[r.clone()], y, smoothing, scale, &mut dlogits[r]);
        loss_sum += l;
        correct += usize::from(hit);
    }
    Ok(LossOutput {
        loss_sum,
        correct,
        count: labels.len(),
        dlogits,
    })
}
