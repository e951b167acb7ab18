//! Cross-entropy and class-balanced cross-entropy losses.
//!
//! The class-balanced variant scales each sample's cross-entropy by a weight
//! derived from the effective number of samples of its ground-truth class:
//! `weight[y] = (1 - beta) / (1 - beta^n_y)`, with the `beta = 1` limit
//! `1 / n_y`. Batch reductions are weighted means (sum of weighted losses
//! divided by the sum of applied weights), so the loss scale stays comparable
//! to plain cross-entropy as the class mix varies.

use crate::autodiff::{cross_entropy_raw, AutodiffError, Tape, TensorId};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("class counts must be non-empty")]
    EmptyCounts,
    #[error("class {class} has count 0; weights are undefined for absent classes")]
    ZeroCount { class: usize },
    #[error("beta must lie in [0, 1], got {0}")]
    BetaOutOfRange(f64),
    #[error("expected {expected} class weights, got {got}")]
    ClassCountMismatch { expected: usize, got: usize },
    #[error("batch has {logits} logit vectors but {targets} targets")]
    BatchLengthMismatch { logits: usize, targets: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Per-class loss weights from the effective-number formula.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    beta: f64,
    class_counts: Vec<u64>,
    weights: Vec<f64>,
    normalized: bool,
}

impl ClassWeights {
    /// Raw effective-number weights: `(1 - beta) / (1 - beta^n)` for
    /// `beta < 1`, and the analytic limit `1 / n` at `beta = 1`.
    ///
    /// Rejects absent classes (count 0): their weight is undefined.
    pub fn effective_number(class_counts: &[u64], beta: f64) -> Result<Self, LossError> {
        if class_counts.is_empty() {
            return Err(LossError::EmptyCounts);
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(LossError::BetaOutOfRange(beta));
        }
        let mut weights = Vec::with_capacity(class_counts.len());
        for (class, &n) in class_counts.iter().enumerate() {
            if n == 0 {
                return Err(LossError::ZeroCount { class });
            }
            weights.push(effective_number_weight(n, beta));
        }
        Ok(ClassWeights {
            beta,
            class_counts: class_counts.to_vec(),
            weights,
            normalized: false,
        })
    }

    /// Rescales so the weights sum to the class count C, preserving ratios.
    pub fn normalize(mut self) -> Self {
        let c = self.weights.len() as f64;
        let total: f64 = self.weights.iter().sum();
        let factor = c / total;
        for w in &mut self.weights {
            *w *= factor;
        }
        self.normalized = true;
        self
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn class_counts(&self) -> &[u64] {
        &self.class_counts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    fn check_classes(&self, classes: usize) -> Result<(), LossError> {
        if self.weights.len() != classes {
            return Err(LossError::ClassCountMismatch {
                expected: classes,
                got: self.weights.len(),
            });
        }
        Ok(())
    }
}

/// `(1 - beta) / (1 - beta^n)` evaluated without cancellation:
/// `1 - beta^n = -expm1(n * log1p(beta - 1))`.
fn effective_number_weight(n: u64, beta: f64) -> f64 {
    if beta == 1.0 {
        return 1.0 / n as f64;
    }
    let one_minus_beta_pow_n = -(n as f64 * (beta - 1.0).ln_1p()).exp_m1();
    (1.0 - beta) / one_minus_beta_pow_n
}

/// Cross-entropy of one logit vector against a class index, on the tape.
pub fn ce_loss(tape: &mut Tape, logits: TensorId, target: usize) -> Result<TensorId, LossError> {
    Ok(tape.cross_entropy(logits, target)?)
}

/// Mean cross-entropy over a batch of logit vectors.
pub fn ce_loss_batch(
    tape: &mut Tape,
    logits: &[TensorId],
    targets: &[usize],
) -> Result<TensorId, LossError> {
    if logits.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if logits.len() != targets.len() {
        return Err(LossError::BatchLengthMismatch {
            logits: logits.len(),
            targets: targets.len(),
        });
    }
    let inv = 1.0 / logits.len() as f64;
    let mut terms = Vec::with_capacity(logits.len());
    for (&l, &t) in logits.iter().zip(targets) {
        terms.push((tape.cross_entropy(l, t)?, inv));
    }
    Ok(tape.lin_comb(&terms)?)
}

/// Class-balanced cross-entropy of one sample: `weight[y] * ce(logits, y)`.
pub fn cbce_loss(
    tape: &mut Tape,
    logits: TensorId,
    target: usize,
    weights: &ClassWeights,
) -> Result<TensorId, LossError> {
    weights.check_classes(tape.shape(logits)[0])?;
    let ce = tape.cross_entropy(logits, target)?;
    Ok(tape.scale(ce, weights.weights()[target]))
}

/// Weighted-mean class-balanced cross-entropy over a batch:
/// `sum_i w[y_i] * ce_i / sum_i w[y_i]`.
pub fn cbce_loss_batch(
    tape: &mut Tape,
    logits: &[TensorId],
    targets: &[usize],
    weights: &ClassWeights,
) -> Result<TensorId, LossError> {
    if logits.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if logits.len() != targets.len() {
        return Err(LossError::BatchLengthMismatch {
            logits: logits.len(),
            targets: targets.len(),
        });
    }
    weights.check_classes(tape.shape(logits[0])[0])?;
    let applied: f64 = targets.iter().map(|&t| weights.weights()[t]).sum();
    let mut terms = Vec::with_capacity(logits.len());
    for (&l, &t) in logits.iter().zip(targets) {
        terms.push((tape.cross_entropy(l, t)?, weights.weights()[t] / applied));
    }
    Ok(tape.lin_comb(&terms)?)
}

/// Cross-entropy of a plain logit slice (no tape); same formula and
/// evaluation order as the tape op. Used for validation-loss bookkeeping.
pub fn ce_value(logits: &[f64], target: usize) -> f64 {
    cross_entropy_raw(logits, target)
}
