//! Model contract and reference backends.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{MaskedExample, IGNORE};

pub mod kernels;
pub mod optim;
pub mod stub;
pub mod tensorfile;
pub mod tiny;

pub use optim::{AdamW, OptimizerConfig};
pub use stub::{StubBackend, StubTable};
pub use tiny::{TinyConfig, TinyEncoder};

/// Unnormalized scores, shape `(batch, seq_len, vocab)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionLogits {
    pub batch: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub data: Vec<f32>,
}

impl PositionLogits {
    pub fn zeros(batch: usize, seq_len: usize, vocab: usize) -> Self {
        Self {
            batch,
            seq_len,
            vocab,
            data: vec![0.0; batch * seq_len * vocab],
        }
    }

    pub fn row(&self, example: usize, position: usize) -> &[f32] {
        let start = (example * self.seq_len + position) * self.vocab;
        &self.data[start..start + self.vocab]
    }

    pub fn row_mut(&mut self, example: usize, position: usize) -> &mut [f32] {
        let start = (example * self.seq_len + position) * self.vocab;
        &mut self.data[start..start + self.vocab]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Anything that scores every vocabulary entry at every position.
pub trait Backend: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Deterministic for fixed weights and inputs.
    fn forward(&self, batch: &[MaskedExample]) -> Result<PositionLogits>;
}

/// A backend whose parameters can be updated and checkpointed.
pub trait TrainableBackend: Backend {
    fn zero_grad(&mut self);

    /// Add the gradient of the *summed* NLL over the batch's labeled
    /// positions to the gradient buffer. Returns `(nll_sum, labeled)`.
    ///
    /// Examples are folded into the buffer one at a time in batch order, so
    /// splitting a batch into micro-batches gives bit-identical sums.
    fn accumulate_gradients(&mut self, batch: &[MaskedExample]) -> Result<(f64, usize)>;

    /// One optimizer update with gradients multiplied by `grad_scale`; clears the gradient buffer.
    fn apply_update(&mut self, opt: &OptimizerConfig, grad_scale: f32);

    fn optimizer_steps(&self) -> u64;

    fn set_mixed_precision(&mut self, on: bool);

    /// Write weights, model config and optimizer state into `dir`.
    fn save(&self, dir: &Path) -> Result<()>;

    /// Restore weights and optimizer state written by [`TrainableBackend::save`].
    fn restore(&mut self, dir: &Path) -> Result<()>;
}

/// Negative log-likelihood of `label` under softmax(`row`), in f64.
pub fn nll(row: &[f32], label: u32) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
    max + sum.ln() - row[label as usize] as f64
}

/// Mean cross-entropy over labeled positions.
pub fn loss(logits: &PositionLogits, batch: &[MaskedExample]) -> Result<f64> {
    if logits.batch != batch.len() {
        return Err(Error::config(format!(
            "logits batch {} does not match {} examples",
            logits.batch,
            batch.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, ex) in batch.iter().enumerate() {
        if ex.labels.len() != logits.seq_len {
            return Err(Error::config("label length does not match logits"));
        }
        for (i, label) in ex.labeled_positions() {
            if label as usize >= logits.vocab {
                return Err(Error::config(format!("label {label} outside vocabulary")));
            }
            total += nll(logits.row(b, i), label);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoSupervisedPositions);
    }
    Ok(total / count as f64)
}

/// One optimizer step on a single batch; returns the pre-update loss.
pub fn train_step(
    backend: &mut dyn TrainableBackend,
    batch: &[MaskedExample],
    opt: &OptimizerConfig,
) -> Result<f64> {
    backend.zero_grad();
    let (sum, count) = backend.accumulate_gradients(batch)?;
    if count == 0 {
        return Err(Error::NoSupervisedPositions);
    }
    let loss = sum / count as f64;
    if !loss.is_finite() {
        backend.zero_grad();
        return Err(Error::NonFiniteLoss {
            loss,
            step: backend.optimizer_steps() as usize,
            epoch: 0,
            origin: batch.first().map(|e| e.origin),
        });
    }
    backend.apply_update(opt, 1.0 / count as f32);
    Ok(loss)
}

/// Loss on one reference batch at full and at mixed precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub full: f64,
    pub mixed: f64,
}

impl PrecisionReport {
    pub fn relative_gap(&self) -> f64 {
        (self.mixed - self.full).abs() / self.full.abs()
    }
}

pub(crate) fn labels_in_range(batch: &[MaskedExample], vocab: usize) -> Result<()> {
    for ex in batch {
        if let Some(&bad) = ex.labels.iter().find(|&&l| l != IGNORE && l as usize >= vocab) {
            return Err(Error::config(format!(
                "label {bad} in chunk {:?} is outside the vocabulary ({vocab})",
                ex.origin
            )));
        }
        if let Some(&bad) = ex.input_ids.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::config(format!(
                "input id {bad} in chunk {:?} is outside the vocabulary ({vocab})",
                ex.origin
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Origin;

    fn example(labels: Vec<u32>) -> MaskedExample {
        let n = labels.len();
        MaskedExample::new(vec![5; n], labels, 0, Origin::new(0, 0))
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let logits = PositionLogits::zeros(2, 4, 50);
        let batch = vec![example(vec![7, IGNORE, 3, 49]), example(vec![IGNORE, 0, IGNORE, 12])];
        let l = loss(&logits, &batch).unwrap();
        assert!((l - 50f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mut logits = PositionLogits::zeros(1, 3, 10);
        let batch = vec![example(vec![4, 9, IGNORE])];
        logits.row_mut(0, 0)[4] = 60.0;
        logits.row_mut(0, 1)[9] = 60.0;
        assert!(loss(&logits, &batch).unwrap() < 1e-20);
    }

    #[test]
    fn hand_computed_two_by_four_batch() {
        // vocab 3; rows chosen so the softmax terms are easy to evaluate by hand
        let mut logits = PositionLogits::zeros(2, 4, 3);
        logits.row_mut(0, 0).copy_from_slice(&[1.0, 2.0, 3.0]);
        logits.row_mut(0, 2).copy_from_slice(&[0.0, 0.0, 0.0]);
        logits.row_mut(1, 1).copy_from_slice(&[2.0, 0.0, -1.0]);
        logits.row_mut(1, 3).copy_from_slice(&[0.5, 0.5, 1.5]);
        let batch = vec![
            example(vec![2, IGNORE, 1, IGNORE]),
            example(vec![IGNORE, 0, IGNORE, 2]),
        ];
        // -log softmax, evaluated independently:
        // [1,2,3] label 2: ln(e+e^2+e^3) - 3            = 0.40760596444438
        // [0,0,0] label 1: ln 3                         = 1.09861228866811
        // [2,0,-1] label 0: ln(e^2+1+e^-1) - 2          = 0.16984601955629
        // [.5,.5,1.5] label 2: ln(2e^.5+e^1.5) - 1.5    = 0.55144471393205
        let expected = (0.40760596444438 + 1.09861228866811 + 0.16984601955629 + 0.55144471393205) / 4.0;
        let got = loss(&logits, &batch).unwrap();
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn all_ignore_is_an_error() {
        let logits = PositionLogits::zeros(1, 3, 10);
        let batch = vec![example(vec![IGNORE; 3])];
        assert!(matches!(loss(&logits, &batch), Err(Error::NoSupervisedPositions)));
    }

    #[test]
    fn ignore_positions_do_not_affect_loss() {
        let mut logits = PositionLogits::zeros(1, 3, 10);
        let batch = vec![example(vec![1, IGNORE, 2])];
        let before = loss(&logits, &batch).unwrap();
        logits.row_mut(0, 1).copy_from_slice(&[9.0, -3.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 4.0]);
        assert_eq!(loss(&logits, &batch).unwrap(), before);
    }
}
