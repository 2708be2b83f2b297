//! Deterministic scoring stubs for metric tests.

use std::fmt;
use std::sync::Arc;

use crate::error::Result;
use crate::mask::{MaskedExample, IGNORE};
use crate::model::{Backend, PositionLogits};
use crate::Origin;

/// Scoring callback: `(origin, position, input id, label) -> scores`.
/// `label` is `None` at unlabeled positions.
pub type ScoreFn = dyn Fn(Origin, usize, u32, Option<u32>) -> Vec<f32> + Send + Sync;

#[derive(Clone)]
pub enum StubTable {
    /// All-zero logits.
    Uniform,
    /// Row `position % rows.len()`.
    ByPosition(Vec<Vec<f32>>),
    /// Row indexed by the true label; unlabeled positions score uniformly.
    ByLabel(Vec<Vec<f32>>),
    Custom(Arc<ScoreFn>),
}

impl fmt::Debug for StubTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StubTable::Uniform => f.write_str("Uniform"),
            StubTable::ByPosition(t) => write!(f, "ByPosition({} rows)", t.len()),
            StubTable::ByLabel(t) => write!(f, "ByLabel({} rows)", t.len()),
            StubTable::Custom(_) => f.write_str("Custom"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StubBackend {
    vocab_size: usize,
    table: StubTable,
}

impl StubBackend {
    pub fn new(vocab_size: usize, table: StubTable) -> Self {
        Self { vocab_size, table }
    }

    pub fn uniform(vocab_size: usize) -> Self {
        Self::new(vocab_size, StubTable::Uniform)
    }

    /// Puts `margin` on the true label and zero elsewhere.
    pub fn oracle(vocab_size: usize, margin: f32) -> Self {
        let rows = (0..vocab_size)
            .map(|l| {
                let mut r = vec![0.0; vocab_size];
                r[l] = margin;
                r
            })
            .collect();
        Self::new(vocab_size, StubTable::ByLabel(rows))
    }

    pub fn custom<F>(vocab_size: usize, f: F) -> Self
    where
        F: Fn(Origin, usize, u32, Option<u32>) -> Vec<f32> + Send + Sync + 'static,
    {
        Self::new(vocab_size, StubTable::Custom(Arc::new(f)))
    }
}

impl Backend for StubBackend {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn forward(&self, batch: &[MaskedExample]) -> Result<PositionLogits> {
        let seq_len = batch.first().map_or(0, |e| e.input_ids.len());
        let mut out = PositionLogits::zeros(batch.len(), seq_len, self.vocab_size);
        for (b, ex) in batch.iter().enumerate() {
            for i in 0..seq_len {
                let label = (ex.labels[i] != IGNORE).then_some(ex.labels[i]);
                let row = out.row_mut(b, i);
                match &self.table {
                    StubTable::Uniform => {}
                    StubTable::ByPosition(t) => row.copy_from_slice(&t[i % t.len()]),
                    StubTable::ByLabel(t) => {
                        if let Some(l) = label {
                            row.copy_from_slice(&t[l as usize]);
                        }
                    }
                    StubTable::Custom(f) => {
                        let scores = f(ex.origin, i, ex.input_ids[i], label);
                        assert_eq!(scores.len(), self.vocab_size, "custom stub row width");
                        row.copy_from_slice(&scores);
                    }
                }
            }
        }
        Ok(out)
    }
}
