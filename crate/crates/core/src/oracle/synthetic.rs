//! A small frozen classifier standing in for a pretrained model, and a task
//! generator that plants a known-good prompt in the projection's range.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_batch, cross_entropy, LossReport, Oracle, Sample};
use crate::error::{Error, Result};
use crate::seed;
use crate::subspace::Projection;

/// Frozen network: embedding lookup, mean pooling over prompt and input
/// tokens, then `tanh(W1 x)` and a linear readout `W2 h`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPLM {
    vocab_size: usize,
    embed_dim: usize,
    prompt_tokens: usize,
    hidden_dim: usize,
    num_classes: usize,
    // row-major: vocab_size x embed_dim
    embedding: Vec<f64>,
    // row-major: hidden_dim x embed_dim
    hidden: Vec<f64>,
    // row-major: num_classes x hidden_dim
    readout: Vec<f64>,
    input_gain: f64,
    logit_scale: f64,
}

impl SyntheticPLM {
    /// Draws every weight from `N(0, 1/sqrt(fan_in))`. The embedding table is a
    /// lookup (one-hot input), so its fan-in is 1.
    pub fn random<R: Rng + ?Sized>(
        vocab_size: usize,
        embed_dim: usize,
        prompt_tokens: usize,
        hidden_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let std = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let embedding = draw(vocab_size * embed_dim, 1);
        let hidden = draw(hidden_dim * embed_dim, embed_dim);
        let readout = draw(num_classes * hidden_dim, hidden_dim);
        Self::from_weights(vocab_size, embed_dim, prompt_tokens, hidden_dim, num_classes, embedding, hidden, readout)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_weights(
        vocab_size: usize,
        embed_dim: usize,
        prompt_tokens: usize,
        hidden_dim: usize,
        num_classes: usize,
        embedding: Vec<f64>,
        hidden: Vec<f64>,
        readout: Vec<f64>,
    ) -> Result<Self> {
        if vocab_size == 0 || embed_dim == 0 || hidden_dim == 0 || num_classes == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if embedding.len() != vocab_size * embed_dim
            || hidden.len() != hidden_dim * embed_dim
            || readout.len() != num_classes * hidden_dim
        {
            return Err(Error::invalid("weight shapes do not match model dimensions"));
        }
        Ok(Self {
            vocab_size,
            embed_dim,
            prompt_tokens,
            hidden_dim,
            num_classes,
            embedding,
            hidden,
            readout,
            input_gain: 1.0,
            logit_scale: 1.0,
        })
    }

    /// Multiplies every logit by `scale` (inverse softmax temperature).
    pub fn with_logit_scale(mut self, scale: f64) -> Self {
        self.logit_scale = scale;
        self
    }

    /// Multiplies the pooled vector by `gain` before the hidden layer.
    pub fn with_input_gain(mut self, gain: f64) -> Self {
        self.input_gain = gain;
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn prompt_tokens(&self) -> usize {
        self.prompt_tokens
    }

    fn check_prompt(&self, prompt: &[f64]) -> Result<()> {
        if prompt.len() != self.prompt_dim() {
            return Err(Error::invalid(format!("prompt has length {}, expected {}", prompt.len(), self.prompt_dim())));
        }
        Ok(())
    }

    fn check_tokens(&self, batch: &[Sample]) -> Result<()> {
        check_batch(batch, self.num_classes)?;
        if let Some(t) = batch.iter().flat_map(|s| &s.token_ids).find(|t| **t as usize >= self.vocab_size) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary of {}", self.vocab_size)));
        }
        Ok(())
    }

    // Sum of the prompt's pseudo-token embeddings.
    fn prompt_sum(&self, prompt: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.embed_dim];
        for chunk in prompt.chunks_exact(self.embed_dim) {
            for (a, v) in acc.iter_mut().zip(chunk) {
                *a += v;
            }
        }
        acc
    }

    fn logits(&self, prompt_sum: &[f64], tokens: &[u32]) -> Vec<f64> {
        let e = self.embed_dim;
        let mut pooled = prompt_sum.to_vec();
        for &t in tokens {
            let row = &self.embedding[t as usize * e..(t as usize + 1) * e];
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += v;
            }
        }
        let scale = self.input_gain / (self.prompt_tokens + tokens.len()) as f64;
        pooled.iter_mut().for_each(|p| *p *= scale);

        let hidden: Vec<f64> = self
            .hidden
            .chunks_exact(e)
            .map(|w| w.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>().tanh())
            .collect();
        self.readout
            .chunks_exact(self.hidden_dim)
            .map(|w| self.logit_scale * w.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }
}

impl Oracle for SyntheticPLM {
    fn prompt_dim(&self) -> usize {
        self.prompt_tokens * self.embed_dim
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn evaluate(&self, prompt: &[f64], batch: &[Sample]) -> Result<LossReport> {
        self.check_prompt(prompt)?;
        self.check_tokens(batch)?;
        let base = self.prompt_sum(prompt);
        let mut per_sample = Vec::with_capacity(batch.len());
        let mut correct = 0usize;
        for s in batch {
            let (loss, pred) = cross_entropy(&self.logits(&base, &s.token_ids), s.label);
            per_sample.push(loss);
            correct += usize::from(pred == s.label);
        }
        let n = batch.len() as f64;
        Ok(LossReport {
            loss: per_sample.iter().sum::<f64>() / n,
            accuracy: correct as f64 / n,
            per_sample_loss: Some(per_sample),
            num_classes: self.num_classes,
        })
    }

    fn predict(&self, prompt: &[f64], batch: &[Sample]) -> Result<Vec<usize>> {
        self.check_prompt(prompt)?;
        if let Some(t) = batch.iter().flat_map(|s| &s.token_ids).find(|t| **t as usize >= self.vocab_size) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary of {}", self.vocab_size)));
        }
        let base = self.prompt_sum(prompt);
        Ok(batch.iter().map(|s| super::argmax(&self.logits(&base, &s.token_ids))).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub prompt_tokens: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub seq_len: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Required test-accuracy gap between the planted prompt and the zero prompt.
    pub min_gap: f64,
    pub max_retries: usize,
    /// Pre-activation gain on the pooled vector.
    pub input_gain: f64,
    /// Inverse softmax temperature of the readout.
    pub logit_scale: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 100,
            embed_dim: 20,
            prompt_tokens: 5,
            hidden_dim: 32,
            num_classes: 4,
            seq_len: 16,
            train_per_class: 40,
            test_per_class: 100,
            min_gap: 0.10,
            max_retries: 50,
            input_gain: 3.0,
            logit_scale: 20.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub model: SyntheticPLM,
    pub golden_z: Vec<f64>,
    pub golden_prompt: Vec<f64>,
    /// Class-balanced, shuffled.
    pub train: Vec<Sample>,
    /// Class-balanced, disjoint from `train`.
    pub test: Vec<Sample>,
    /// Zero-prompt test accuracy.
    pub floor: f64,
    /// Planted-prompt test accuracy.
    pub ceiling: f64,
    pub attempts: usize,
}

/// Builds a task whose labels are the model's own predictions under the
/// planted prompt `A * golden_z`, resampling until the planted prompt beats
/// the zero prompt by `min_gap` on the test set.
pub fn generate_task(cfg: &TaskConfig, projection: &Projection, seed: u64) -> Result<SyntheticTask> {
    let full_dim = cfg.prompt_tokens * cfg.embed_dim;
    if projection.full_dim() != full_dim {
        return Err(Error::invalid(format!(
            "projection maps to {} dimensions, task prompt has {full_dim}",
            projection.full_dim()
        )));
    }
    if cfg.num_classes < 2 || cfg.seq_len == 0 || cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(Error::invalid("task needs at least 2 classes, non-empty sequences and splits"));
    }
    if cfg.vocab_size > u32::MAX as usize {
        return Err(Error::invalid("vocabulary too large"));
    }

    let per_class = cfg.train_per_class + cfg.test_per_class;
    let max_draws = 200 * per_class * cfg.num_classes;
    let mut last_reason = String::from("no attempts made");

    for attempt in 0..cfg.max_retries.max(1) {
        let mut rng = seed::derived_stream(seed, "task", attempt as u64, 0);
        let model = SyntheticPLM::random(
            cfg.vocab_size,
            cfg.embed_dim,
            cfg.prompt_tokens,
            cfg.hidden_dim,
            cfg.num_classes,
            &mut rng,
        )?
        .with_input_gain(cfg.input_gain)
        .with_logit_scale(cfg.logit_scale);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let golden_z: Vec<f64> = (0..projection.sub_dim()).map(|_| unit.sample(&mut rng)).collect();
        let golden_prompt = projection.project(&golden_z)?;
        let base = model.prompt_sum(&golden_prompt);

        let mut buckets: Vec<Vec<Sample>> = vec![Vec::new(); cfg.num_classes];
        let mut draws = 0;
        while buckets.iter().any(|b| b.len() < per_class) && draws < max_draws {
            draws += 1;
            let tokens: Vec<u32> = (0..cfg.seq_len).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
            let label = super::argmax(&model.logits(&base, &tokens));
            if buckets[label].len() < per_class {
                buckets[label].push(Sample::new(tokens, label));
            }
        }
        if let Some(c) = buckets.iter().position(|b| b.len() < per_class) {
            last_reason = format!(
                "class {c} too rare under the planted prompt (its norm grows like gamma * sqrt(d); try a smaller projection gamma)"
            );
            log::debug!("task attempt {attempt}: {last_reason}");
            continue;
        }

        let mut train = Vec::with_capacity(cfg.train_per_class * cfg.num_classes);
        let mut test = Vec::with_capacity(cfg.test_per_class * cfg.num_classes);
        for mut bucket in buckets {
            let rest = bucket.split_off(cfg.train_per_class);
            train.extend(bucket);
            test.extend(rest);
        }
        rand::seq::SliceRandom::shuffle(train.as_mut_slice(), &mut rng);
        rand::seq::SliceRandom::shuffle(test.as_mut_slice(), &mut rng);

        let floor = model.evaluate(&vec![0.0; full_dim], &test)?.accuracy;
        let ceiling = model.evaluate(&golden_prompt, &test)?.accuracy;
        if ceiling - floor >= cfg.min_gap {
            return Ok(SyntheticTask {
                model,
                golden_z,
                golden_prompt,
                train,
                test,
                floor,
                ceiling,
                attempts: attempt + 1,
            });
        }
        last_reason = format!("gap {:.3} below {}", ceiling - floor, cfg.min_gap);
        log::debug!("task attempt {attempt}: {last_reason}");
    }
    Err(Error::TaskGeneration { attempts: cfg.max_retries.max(1), reason: last_reason })
}
