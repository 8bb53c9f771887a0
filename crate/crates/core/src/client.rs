//! One client's local round: `I - 1` CMA-ES iterations over `z` scored with
//! the perturbation-ratio objective, then a clean-loss evaluation of the
//! final mean.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cma::{CmaParams, RankedSample, SearchDistribution, WeightScheme};
use crate::datasets::Shard;
use crate::error::{Error, Result};
use crate::oracle::{Oracle, Sample};
use crate::seed::{self, StreamRng};
use crate::server::Broadcast;
use crate::subspace::Projection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundConfig {
    pub local_iterations: usize,
    pub population: usize,
    pub mask_rate: f64,
    pub denominator_floor: f64,
    pub vocab_size: usize,
    pub weights: WeightScheme,
    pub eigen_refresh: usize,
    /// Master seed; the round's stream is derived from it with the round and
    /// client id.
    pub seed: u64,
}

impl Default for ClientRoundConfig {
    fn default() -> Self {
        Self {
            local_iterations: 8,
            population: 5,
            mask_rate: 0.4,
            denominator_floor: 1e-8,
            vocab_size: 100,
            weights: WeightScheme::Equal,
            eigen_refresh: 1,
            seed: 0,
        }
    }
}

impl ClientRoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_iterations == 0 || self.population == 0 {
            return Err(Error::invalid("local iterations and population must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::invalid(format!("mask rate must lie in [0, 1], got {}", self.mask_rate)));
        }
        if self.denominator_floor.is_nan() || self.denominator_floor <= 0.0 {
            return Err(Error::invalid("denominator floor must be positive"));
        }
        if self.mask_rate > 0.0 && self.vocab_size == 0 {
            return Err(Error::invalid("perturbation needs a non-empty vocabulary"));
        }
        Ok(())
    }

    pub fn stream(&self, round: u64, client_id: usize) -> StreamRng {
        seed::derived_stream(self.seed, "client", round, client_id as u64)
    }
}

/// What a client uploads after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientResult {
    pub client_id: usize,
    pub final_mean: Vec<f64>,
    /// The broadcast step, then the step after each local update.
    pub step_lengths: Vec<f64>,
    /// Clean loss at `final_mean`.
    pub local_loss: f64,
    pub sample_count: usize,
}

/// Upload plus the client's final local distribution, which only the
/// direct-averaging baseline consumes.
#[derive(Debug, Clone)]
pub struct LocalRound {
    pub result: ClientResult,
    pub final_distribution: SearchDistribution,
}

/// Replaces exactly `round(mask_rate * len)` positions of every sample with
/// uniform tokens from `[0, vocab_size)`. Labels are kept.
pub fn perturb_batch<R: Rng + ?Sized>(batch: &[Sample], mask_rate: f64, vocab_size: usize, rng: &mut R) -> Vec<Sample> {
    batch
        .iter()
        .map(|s| {
            let len = s.token_ids.len();
            let count = ((mask_rate * len as f64).round() as usize).min(len);
            let mut tokens = s.token_ids.clone();
            if count > 0 && vocab_size > 0 {
                for pos in index::sample(rng, len, count) {
                    tokens[pos] = rng.gen_range(0..vocab_size as u32);
                }
            }
            Sample { token_ids: tokens, label: s.label }
        })
        .collect()
}

/// `L_clean / max(L_pert, floor)`.
pub fn ratio_of_losses(clean: f64, perturbed: f64, floor: f64) -> f64 {
    clean / perturbed.max(floor)
}

pub fn ratio_objective(
    oracle: &dyn Oracle,
    projection: &Projection,
    z: &[f64],
    clean: &[Sample],
    perturbed: &[Sample],
    floor: f64,
) -> Result<f64> {
    if clean.len() != perturbed.len() || clean.iter().zip(perturbed).any(|(a, b)| a.label != b.label) {
        return Err(Error::invalid("clean and perturbed batches are not aligned"));
    }
    let prompt = projection.project(z)?;
    let l_clean = oracle.evaluate(&prompt, clean)?.loss;
    let l_pert = oracle.evaluate(&prompt, perturbed)?.loss;
    Ok(ratio_of_losses(l_clean, l_pert, floor))
}

pub fn run_local_round(
    broadcast: &Broadcast,
    shard: &Shard,
    oracle: &dyn Oracle,
    projection: &Projection,
    cfg: &ClientRoundConfig,
) -> Result<LocalRound> {
    local_round(broadcast, shard, oracle, projection, cfg).map_err(|e| match e {
        Error::InvalidArgument(_) => e,
        other => Error::RoundFailure { client: shard.client_id, source: Box::new(other) },
    })
}

fn local_round(
    broadcast: &Broadcast,
    shard: &Shard,
    oracle: &dyn Oracle,
    projection: &Projection,
    cfg: &ClientRoundConfig,
) -> Result<LocalRound> {
    cfg.validate()?;
    if shard.samples.is_empty() {
        return Err(Error::invalid(format!("client {} has an empty shard", shard.client_id)));
    }
    let dim = broadcast.mean.len();
    let params = CmaParams::new(dim, cfg.population, cfg.weights).map(|mut p| {
        p.eigen_refresh = cfg.eigen_refresh;
        p
    })?;
    let mut dist = SearchDistribution::from_parts(&broadcast.mean, broadcast.step, broadcast.cov.clone(), 0)?;
    let mut rng = cfg.stream(broadcast.round, shard.client_id);
    let mut steps = Vec::with_capacity(cfg.local_iterations);
    steps.push(broadcast.step);

    for _ in 1..cfg.local_iterations {
        // one mask set per iteration, shared by every candidate
        let perturbed =
            (cfg.mask_rate > 0.0).then(|| perturb_batch(&shard.samples, cfg.mask_rate, cfg.vocab_size, &mut rng));
        let candidates = dist.sample_population(cfg.population, &mut rng);
        let ranked = candidates
            .into_iter()
            .map(|z| {
                let fitness = match &perturbed {
                    Some(p) => ratio_objective(oracle, projection, &z, &shard.samples, p, cfg.denominator_floor)?,
                    None => oracle.evaluate(&projection.project(&z)?, &shard.samples)?.loss,
                };
                Ok(RankedSample::new(z, fitness))
            })
            .collect::<Result<Vec<_>>>()?;
        let step = dist.step();
        dist = dist.update(&ranked, &params, step)?;
        steps.push(dist.step());
    }

    let local_loss = oracle.evaluate(&projection.project(dist.mean())?, &shard.samples)?.loss;
    if !local_loss.is_finite() {
        return Err(Error::NumericFailure(format!("non-finite local loss {local_loss}")));
    }
    Ok(LocalRound {
        result: ClientResult {
            client_id: shard.client_id,
            final_mean: dist.mean().to_vec(),
            step_lengths: steps,
            local_loss,
            sample_count: shard.size(),
        },
        final_distribution: dist,
    })
}
