//! Round aggregation.
//!
//! [`aggregate_fedbpt`] runs one server-level CMA-ES step with the uploaded
//! client means as the population and their clean local losses as fitness.
//! Displacements are normalized by [`corrected_sigma`], which rebuilds the
//! server step from every local step length of the better half of the
//! clients. The next broadcast step is the current one scaled by the
//! cumulative step-size factor; see [`ServerStep`] for the alternatives.
//! [`aggregate_fedavg_bbt`] is the direct-averaging baseline.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::client::ClientResult;
use crate::cma::{CmaParams, RankedSample, SearchDistribution, WeightScheme, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::subspace::ProjectionSpec;

/// Global parameters sent to every client at the start of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub round: u64,
    pub mean: Vec<f64>,
    pub step: f64,
    pub cov: DMatrix<f64>,
    pub projection: Option<ProjectionSpec>,
}

impl Broadcast {
    pub fn from_distribution(dist: &SearchDistribution, round: u64, projection: Option<ProjectionSpec>) -> Self {
        Self { round, mean: dist.mean().to_vec(), step: dist.step(), cov: dist.cov().clone(), projection }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    #[default]
    #[serde(alias = "fedbpt")]
    FedBpt,
    #[serde(alias = "fedavg_bbt")]
    FedAvgBbt,
}

/// How the server step is chosen. `effective` below is the step that
/// normalizes the mean displacement in the path and covariance updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ServerStep {
    /// `effective` is the corrected step; the step-size factor from the path
    /// length then scales the broadcast step.
    #[default]
    Corrected,
    /// `effective` is the corrected step and the step-size factor scales it
    /// directly. Grows roughly geometrically whenever local steps stay near
    /// the broadcast step, since the corrected step is then about
    /// `sqrt(2 I / lambda_k)` times larger.
    CorrectedRescaled,
    /// `effective` is the broadcast step. Debug only: reproduces the
    /// divergence the corrected step avoids.
    Uncorrected,
}

/// Results sorted by client id, then stably by local loss.
fn ranked_by_loss(results: &[ClientResult]) -> Vec<&ClientResult> {
    let mut sorted: Vec<&ClientResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.client_id);
    sorted.sort_by(|a, b| a.local_loss.total_cmp(&b.local_loss));
    sorted
}

/// `2 * sqrt( sum_{k in S'} sum_j (sigma_{k,j})^2 / (|S| * lambda_k) )`, where
/// `S'` is the `floor(|S|/2)` results with the lowest local loss (ties by
/// client id). Floored at [`SIGMA_MIN`].
pub fn corrected_sigma(results: &[ClientResult], lambda_k: usize) -> Result<f64> {
    if results.len() < 2 {
        return Err(Error::invalid(format!("corrected step needs at least 2 clients, got {}", results.len())));
    }
    if lambda_k == 0 {
        return Err(Error::invalid("local population must be positive"));
    }
    let iterations = results[0].step_lengths.len();
    if iterations == 0 || results.iter().any(|r| r.step_lengths.len() != iterations) {
        return Err(Error::invalid("clients reported step-length lists of different lengths"));
    }
    if let Some(r) = results.iter().find(|r| !r.local_loss.is_finite()) {
        return Err(Error::invalid(format!("client {} reported a non-finite loss", r.client_id)));
    }
    let selected = results.len() / 2;
    let sum_sq: f64 = ranked_by_loss(results)[..selected].iter().flat_map(|r| &r.step_lengths).map(|s| s * s).sum();
    let sigma = 2.0 * (sum_sq / (results.len() * lambda_k) as f64).sqrt();
    Ok(if sigma.is_finite() { sigma.max(SIGMA_MIN) } else { sigma })
}

/// Server CMA-ES parameters for `clients` uploads: the whole upload set is the
/// population, `mu = floor(clients / 2)`.
pub fn server_params(dim: usize, clients: usize, weights: WeightScheme) -> Result<CmaParams> {
    CmaParams::with_mu(dim, clients, (clients / 2).max(1), weights)
}

pub fn aggregate_fedbpt(
    state: &SearchDistribution,
    results: &[ClientResult],
    params: &CmaParams,
    lambda_k: usize,
) -> Result<(SearchDistribution, f64)> {
    aggregate_fedbpt_with(state, results, params, lambda_k, ServerStep::Corrected)
}

/// Returns the next global distribution and the step used to normalize the
/// displacement.
pub fn aggregate_fedbpt_with(
    state: &SearchDistribution,
    results: &[ClientResult],
    params: &CmaParams,
    lambda_k: usize,
    step_mode: ServerStep,
) -> Result<(SearchDistribution, f64)> {
    let effective = match step_mode {
        ServerStep::Corrected | ServerStep::CorrectedRescaled => corrected_sigma(results, lambda_k)?,
        ServerStep::Uncorrected => {
            if results.len() < 2 {
                return Err(Error::invalid("server aggregation needs at least 2 clients"));
            }
            state.step()
        }
    };
    if params.mu != results.len() / 2 {
        return Err(Error::invalid(format!("server mu {} does not match floor({}/2)", params.mu, results.len())));
    }
    let mut by_id: Vec<&ClientResult> = results.iter().collect();
    by_id.sort_by_key(|r| r.client_id);
    let samples: Vec<RankedSample> =
        by_id.iter().map(|r| RankedSample::new(r.final_mean.clone(), r.local_loss)).collect();
    let next = state.update(&samples, params, effective)?;
    let next = match step_mode {
        ServerStep::Corrected => {
            let factor = next.step() / effective;
            next.with_step(state.step() * factor)?
        }
        ServerStep::CorrectedRescaled | ServerStep::Uncorrected => next,
    };
    Ok((next, effective))
}

/// A client's final local state, as uploaded for direct averaging.
#[derive(Debug, Clone)]
pub struct LocalState {
    pub mean: Vec<f64>,
    pub step: f64,
    pub cov: DMatrix<f64>,
    pub sample_count: usize,
}

impl LocalState {
    pub fn from_distribution(dist: &SearchDistribution, sample_count: usize) -> Self {
        Self { mean: dist.mean().to_vec(), step: dist.step(), cov: dist.cov().clone(), sample_count }
    }
}

/// Sample-count-weighted average of means, steps and covariances. Paths reset.
pub fn aggregate_fedavg_bbt(states: &[LocalState], generation: u64) -> Result<SearchDistribution> {
    let first = states.first().ok_or_else(|| Error::invalid("no client states to average"))?;
    let dim = first.mean.len();
    if states.iter().any(|s| s.mean.len() != dim || s.cov.nrows() != dim || s.cov.ncols() != dim) {
        return Err(Error::invalid("client states have mismatched dimensions"));
    }
    let total: usize = states.iter().map(|s| s.sample_count).sum();
    if total == 0 {
        return Err(Error::invalid("client states carry no samples"));
    }
    let mut mean = vec![0.0; dim];
    let mut step = 0.0;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in states {
        let w = s.sample_count as f64 / total as f64;
        for (m, v) in mean.iter_mut().zip(&s.mean) {
            *m += w * v;
        }
        step += w * s.step;
        cov += &s.cov * w;
    }
    SearchDistribution::from_parts(&mean, step, cov, generation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn result(client_id: usize, loss: f64, steps: Vec<f64>, mean: Vec<f64>) -> ClientResult {
        ClientResult { client_id, final_mean: mean, step_lengths: steps, local_loss: loss, sample_count: 4 }
    }

    #[test]
    fn corrected_sigma_uniform_steps() {
        let results: Vec<_> = (0..10).map(|k| result(k, k as f64, vec![1.0; 8], vec![0.0])).collect();
        let s = corrected_sigma(&results, 5).unwrap();
        assert!((s - 2.0 * 0.8f64.sqrt()).abs() < 1e-12);
        assert!((s - 1.788_854_4).abs() < 1e-7);
    }

    #[test]
    fn corrected_sigma_selects_lower_loss() {
        let results = vec![result(0, 0.1, vec![0.5], vec![0.0]), result(1, 0.9, vec![2.0], vec![0.0])];
        let s = corrected_sigma(&results, 5).unwrap();
        assert!((s - 0.316_227_8).abs() < 1e-7);
        assert!((s - 2.0 * (0.25f64 / 10.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn corrected_sigma_floor_and_errors() {
        let results = vec![result(0, 0.1, vec![0.0; 3], vec![0.0]), result(1, 0.2, vec![0.0; 3], vec![0.0])];
        assert_eq!(corrected_sigma(&results, 5).unwrap(), SIGMA_MIN);
        assert!(matches!(corrected_sigma(&results[..1], 5), Err(Error::InvalidArgument(_))));
        let ragged = vec![result(0, 0.1, vec![1.0], vec![0.0]), result(1, 0.2, vec![1.0, 1.0], vec![0.0])];
        assert!(matches!(corrected_sigma(&ragged, 5), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn tie_goes_to_lower_client_id() {
        let state = SearchDistribution::new(2, &[1.0, 1.0], 1.0).unwrap();
        let results = vec![result(1, 0.5, vec![1.0], vec![2.0, 2.0]), result(0, 0.5, vec![1.0], vec![0.0, 0.0])];
        let params = server_params(2, 2, WeightScheme::Equal).unwrap();
        let (next, _) = aggregate_fedbpt(&state, &results, &params, 5).unwrap();
        assert_eq!(next.mean(), &[0.0, 0.0]);
    }

    #[test]
    fn mean_of_two_best() {
        let state = SearchDistribution::new(2, &[0.0, 0.0], 1.0).unwrap();
        let results = vec![
            result(0, 0.1, vec![1.0; 2], vec![1.0, 0.0]),
            result(1, 0.2, vec![1.0; 2], vec![3.0, 2.0]),
            result(2, 0.9, vec![1.0; 2], vec![-9.0, 9.0]),
            result(3, 0.8, vec![1.0; 2], vec![7.0, 7.0]),
        ];
        let params = server_params(2, 4, WeightScheme::Equal).unwrap();
        let (next, sigma) = aggregate_fedbpt(&state, &results, &params, 5).unwrap();
        assert_eq!(next.mean(), &[2.0, 1.0]);
        assert!((sigma - 2.0 * (4.0f64 / 20.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn step_rules_share_the_factor() {
        let state = SearchDistribution::new(2, &[0.0, 0.0], 0.5).unwrap();
        let results = vec![
            result(0, 0.1, vec![0.5, 0.4, 0.3], vec![1.0, 0.0]),
            result(1, 0.2, vec![0.5, 0.6, 0.7], vec![3.0, 2.0]),
            result(2, 0.9, vec![0.5, 0.5, 0.5], vec![-1.0, 1.0]),
            result(3, 0.8, vec![0.5, 0.2, 0.1], vec![0.0, 2.0]),
        ];
        let params = server_params(2, 4, WeightScheme::Equal).unwrap();
        let (a, sa) = aggregate_fedbpt_with(&state, &results, &params, 5, ServerStep::Corrected).unwrap();
        let (b, sb) = aggregate_fedbpt_with(&state, &results, &params, 5, ServerStep::CorrectedRescaled).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.mean(), b.mean());
        assert_eq!(a.cov(), b.cov());
        assert!((a.step() / 0.5 - b.step() / sb).abs() < 1e-12);
    }

    #[test]
    fn fedavg_of_equal_states() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = LocalState { mean: vec![1.0, -1.0], step: 0.3, cov: cov.clone(), sample_count: 7 };
        let out = aggregate_fedavg_bbt(&[s.clone(), s.clone(), s], 3).unwrap();
        assert!(out.mean().iter().zip([1.0, -1.0]).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!((out.step() - 0.3).abs() < 1e-15);
        assert!((out.cov() - cov).abs().max() < 1e-15);
        assert!(out.path_cov().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fedavg_weights_by_samples() {
        let a = LocalState { mean: vec![0.0, 0.0], step: 1.0, cov: DMatrix::identity(2, 2), sample_count: 1 };
        let b = LocalState {
            mean: vec![4.0, 4.0],
            step: 1.0,
            cov: DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 3.0]),
            sample_count: 3,
        };
        let out = aggregate_fedavg_bbt(&[a, b], 1).unwrap();
        assert_eq!(out.mean(), &[3.0, 3.0]);
        assert!(out.min_eigenvalue() > 0.0);
        assert!(aggregate_fedavg_bbt(&[], 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn scale_equivariant(steps in prop::collection::vec(prop::collection::vec(0.01f64..5.0, 3), 2..8),
                             losses in prop::collection::vec(0.0f64..3.0, 8),
                             c in 0.01f64..100.0) {
            let results: Vec<_> = steps.iter().enumerate()
                .map(|(k, s)| result(k, losses[k], s.clone(), vec![0.0])).collect();
            let scaled: Vec<_> = results.iter()
                .map(|r| ClientResult { step_lengths: r.step_lengths.iter().map(|s| s * c).collect(), ..r.clone() })
                .collect();
            let a = corrected_sigma(&results, 5).unwrap();
            let b = corrected_sigma(&scaled, 5).unwrap();
            prop_assert!((b - c * a).abs() <= 1e-12 * b.max(1.0));
        }

        #[test]
        fn permutation_invariant(steps in prop::collection::vec(prop::collection::vec(0.01f64..5.0, 2), 2..9),
                                 seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let results: Vec<_> = steps.iter().enumerate()
                .map(|(k, s)| result(k, (k * 7 % 11) as f64 + k as f64 * 1e-3, s.clone(), vec![0.0])).collect();
            let mut shuffled = results.clone();
            shuffled.shuffle(&mut crate::seed::stream(seed));
            prop_assert_eq!(corrected_sigma(&results, 5).unwrap(), corrected_sigma(&shuffled, 5).unwrap());
        }

        #[test]
        fn aggregation_stays_valid(seed in any::<u64>(), clients in 2usize..12, dim in 1usize..6) {
            use rand::Rng;
            let mut rng = crate::seed::stream(seed);
            let mut state = SearchDistribution::new(dim, &vec![0.0; dim], 1.0).unwrap();
            let params = server_params(dim, clients, WeightScheme::Equal).unwrap();
            for _ in 0..10 {
                let results: Vec<_> = (0..clients).map(|k| {
                    let mean: Vec<f64> = (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
                    let steps: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..3.0)).collect();
                    result(k, rng.gen_range(0.0..2.0), steps, mean)
                }).collect();
                let (next, _) = aggregate_fedbpt(&state, &results, &params, 5).unwrap();
                prop_assert!(next.min_eigenvalue() > 0.0);
                prop_assert!(next.mean().iter().all(|v| v.is_finite()));
                state = next;
            }
        }
    }
}
