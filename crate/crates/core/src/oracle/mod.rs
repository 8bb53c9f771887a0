//! The black-box boundary. The optimizer only ever sees a model through
//! [`Oracle::evaluate`].

mod functions;
mod remote;
mod synthetic;
pub mod wire;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use functions::TestFunction;
pub use remote::{RemoteOracle, DEFAULT_TIMEOUT};
pub use synthetic::{generate_task, SyntheticPLM, SyntheticTask, TaskConfig};

/// One labeled token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub token_ids: Vec<u32>,
    pub label: usize,
}

impl Sample {
    pub fn new(token_ids: Vec<u32>, label: usize) -> Self {
        Self { token_ids, label }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample_loss: Option<Vec<f64>>,
    pub num_classes: usize,
}

impl LossReport {
    /// True when there is no per-sample list or its mean matches `loss`
    /// within `tol`.
    pub fn is_consistent(&self, tol: f64) -> bool {
        match &self.per_sample_loss {
            None => true,
            Some(v) if v.is_empty() => true,
            Some(v) => (v.iter().sum::<f64>() / v.len() as f64 - self.loss).abs() <= tol,
        }
    }
}

pub trait Oracle: Send + Sync {
    /// Prompt length `D` this oracle accepts.
    fn prompt_dim(&self) -> usize;

    fn num_classes(&self) -> usize;

    fn evaluate(&self, prompt: &[f64], batch: &[Sample]) -> Result<LossReport>;

    /// Predicted class per sample.
    ///
    /// The default probes each sample once per class: a single-sample batch
    /// labeled `c` has accuracy 1 exactly when the argmax is `c`. Oracles that
    /// can read predictions directly should override this.
    fn predict(&self, prompt: &[f64], batch: &[Sample]) -> Result<Vec<usize>> {
        let classes = self.num_classes();
        batch
            .iter()
            .map(|s| {
                for c in 0..classes {
                    let probe = [Sample::new(s.token_ids.clone(), c)];
                    if self.evaluate(prompt, &probe)?.accuracy >= 0.5 {
                        return Ok(c);
                    }
                }
                Err(Error::NumericFailure("no class probe reported a correct prediction".into()))
            })
            .collect()
    }
}

impl<O: Oracle + ?Sized> Oracle for std::sync::Arc<O> {
    fn prompt_dim(&self) -> usize {
        (**self).prompt_dim()
    }
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn evaluate(&self, prompt: &[f64], batch: &[Sample]) -> Result<LossReport> {
        (**self).evaluate(prompt, batch)
    }
    fn predict(&self, prompt: &[f64], batch: &[Sample]) -> Result<Vec<usize>> {
        (**self).predict(prompt, batch)
    }
}

/// Wraps an oracle and counts `evaluate` calls.
#[derive(Debug)]
pub struct CountingOracle<O> {
    inner: O,
    calls: AtomicUsize,
}

impl<O: Oracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<O: Oracle> Oracle for CountingOracle<O> {
    fn prompt_dim(&self) -> usize {
        self.inner.prompt_dim()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn evaluate(&self, prompt: &[f64], batch: &[Sample]) -> Result<LossReport> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.evaluate(prompt, batch)
    }
    // Predictions are bookkeeping, not part of the evaluation budget.
    fn predict(&self, prompt: &[f64], batch: &[Sample]) -> Result<Vec<usize>> {
        self.inner.predict(prompt, batch)
    }
}

/// Numerically stable softmax cross-entropy for one logit row, and whether
/// the lowest-index argmax equals `label`.
pub(crate) fn cross_entropy(logits: &[f64], label: usize) -> (f64, usize) {
    let argmax = argmax(logits);
    let max = logits[argmax];
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    ((lse - logits[label]).max(0.0), argmax)
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn check_batch(batch: &[Sample], num_classes: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("batch is empty"));
    }
    for s in batch {
        if s.token_ids.is_empty() {
            return Err(Error::invalid("sample has no tokens"));
        }
        if s.label >= num_classes {
            return Err(Error::invalid(format!("label {} out of range for {num_classes} classes", s.label)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (loss, arg) = cross_entropy(&[0.0; 4], 2);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(arg, 0);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn consistency_check() {
        let mut r = LossReport { loss: 0.5, accuracy: 1.0, per_sample_loss: Some(vec![0.2, 0.8]), num_classes: 2 };
        assert!(r.is_consistent(1e-9));
        r.loss = 0.6;
        assert!(!r.is_consistent(1e-9));
    }
}
