//! Experiment orchestration: data, partitioning, the round loop, evaluation
//! of `A * z_t`, and the output directory.

pub mod accounting;
pub mod metrics;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{run_local_round, ClientRoundConfig, LocalRound};
use crate::cma::{SearchDistribution, WeightScheme};
use crate::datasets::{
    dirichlet_partition, few_shot_select, load_jsonl, HashTokenizer, PartitionMode, PartitionSpec, Shard,
};
use crate::error::{Error, Result};
use crate::oracle::{generate_task, Oracle, RemoteOracle, Sample, TaskConfig};
use crate::seed::derive_seed;
use crate::server::{
    aggregate_fedavg_bbt, aggregate_fedbpt_with, server_params, AggregatorKind, Broadcast, LocalState, ServerStep,
};
use crate::subspace::{generate_projection, Projection, ProjectionSpec};

pub use metrics::{confusion_matrix, dominant_class_fraction, RoundMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    #[default]
    Synthetic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sub_dim: usize,
    pub prompt_tokens: usize,
    pub embed_dim: usize,
    pub rounds: usize,
    pub clients: usize,
    pub partition: PartitionMode,
    pub alpha: f64,
    pub per_class: usize,
    pub local_iterations: usize,
    pub population: usize,
    pub sigma0: f64,
    pub r_p: f64,
    pub denominator_floor: f64,
    pub aggregator: AggregatorKind,
    pub server_step: ServerStep,
    pub weights: WeightScheme,
    pub eigen_refresh: usize,
    pub projection_gamma: f64,
    pub oracle: OracleKind,
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub hidden_dim: usize,
    pub seq_len: usize,
    pub input_gain: f64,
    pub logit_scale: f64,
    pub test_per_class: usize,
    pub eval_stride: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sub_dim: 500,
            prompt_tokens: 50,
            embed_dim: 20,
            rounds: 60,
            clients: 10,
            partition: PartitionMode::Dirichlet,
            alpha: 1.0,
            per_class: 40,
            local_iterations: 8,
            population: 5,
            sigma0: 1.0,
            r_p: 0.4,
            denominator_floor: 1e-8,
            aggregator: AggregatorKind::FedBpt,
            server_step: ServerStep::Corrected,
            weights: WeightScheme::Equal,
            eigen_refresh: 1,
            projection_gamma: 1.0,
            oracle: OracleKind::Synthetic,
            endpoint: None,
            timeout_secs: 30,
            train_path: None,
            test_path: None,
            vocab_size: 100,
            num_classes: 4,
            hidden_dim: 32,
            seq_len: 16,
            input_gain: 3.0,
            logit_scale: 20.0,
            test_per_class: 100,
            eval_stride: 1,
            seed: 0,
            out: PathBuf::from("runs/latest"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn prompt_dim(&self) -> usize {
        self.prompt_tokens * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.sub_dim == 0 {
            return Err(Error::invalid("sub_dim must be positive"));
        }
        if self.oracle == OracleKind::Synthetic && self.sub_dim > self.prompt_dim() {
            return Err(Error::invalid(format!(
                "sub_dim {} exceeds prompt dimension {}",
                self.sub_dim,
                self.prompt_dim()
            )));
        }
        if self.clients == 0 {
            return Err(Error::invalid("need at least one client"));
        }
        if self.aggregator == AggregatorKind::FedBpt && self.clients < 2 && self.rounds > 0 {
            return Err(Error::invalid("server-level CMA-ES needs at least 2 clients"));
        }
        if self.sigma0.is_nan() || self.sigma0 <= 0.0 {
            return Err(Error::invalid("sigma0 must be positive"));
        }
        if self.per_class == 0 || self.eval_stride == 0 {
            return Err(Error::invalid("per_class and eval_stride must be positive"));
        }
        if self.partition == PartitionMode::Dirichlet && (self.alpha.is_nan() || self.alpha <= 0.0) {
            return Err(Error::invalid("alpha must be positive"));
        }
        self.client_config().validate()
    }

    pub fn client_config(&self) -> ClientRoundConfig {
        ClientRoundConfig {
            local_iterations: self.local_iterations,
            population: self.population,
            mask_rate: self.r_p,
            denominator_floor: self.denominator_floor,
            vocab_size: self.vocab_size,
            weights: self.weights,
            eigen_refresh: self.eigen_refresh,
            seed: self.seed,
        }
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            prompt_tokens: self.prompt_tokens,
            hidden_dim: self.hidden_dim,
            num_classes: self.num_classes,
            seq_len: self.seq_len,
            input_gain: self.input_gain,
            logit_scale: self.logit_scale,
            train_per_class: self.per_class,
            test_per_class: self.test_per_class,
            ..TaskConfig::default()
        }
    }

    pub fn projection_spec(&self, full_dim: usize) -> ProjectionSpec {
        ProjectionSpec {
            full_dim,
            sub_dim: self.sub_dim,
            seed: derive_seed(self.seed, "projection", 0, 0),
            gamma: self.projection_gamma,
        }
    }
}

/// Everything a run needs besides the configuration.
pub struct Setup {
    pub oracle: Arc<dyn Oracle>,
    pub projection: Projection,
    pub shards: Vec<Shard>,
    pub test: Vec<Sample>,
    /// Zero-prompt test accuracy, when known.
    pub floor: Option<f64>,
}

/// Builds the oracle, data and shards described by `cfg`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Setup> {
    cfg.validate()?;
    let (oracle, train_pool, test, projection, floor): (Arc<dyn Oracle>, _, _, _, _) = match cfg.oracle {
        OracleKind::Synthetic => {
            let projection = generate_projection(&cfg.projection_spec(cfg.prompt_dim()))?;
            let task = generate_task(&cfg.task_config(), &projection, derive_seed(cfg.seed, "task", 0, 0))?;
            let floor = task.floor;
            (Arc::new(task.model), task.train, task.test, projection, Some(floor))
        }
        OracleKind::Remote => {
            let endpoint = cfg.endpoint.as_deref().ok_or_else(|| Error::invalid("remote oracle needs an endpoint"))?;
            let remote = RemoteOracle::connect(endpoint, Duration::from_secs(cfg.timeout_secs))?;
            let tokenizer = Some(HashTokenizer { vocab_size: cfg.vocab_size });
            let train_path = cfg.train_path.as_ref().ok_or_else(|| Error::invalid("remote runs need train_path"))?;
            let test_path = cfg.test_path.as_ref().ok_or_else(|| Error::invalid("remote runs need test_path"))?;
            let train = load_jsonl(train_path, tokenizer)?;
            let test = load_jsonl(test_path, tokenizer)?;
            let dim = remote.prompt_dim();
            if cfg.sub_dim > dim {
                return Err(Error::invalid(format!("sub_dim {} exceeds remote prompt_dim {dim}", cfg.sub_dim)));
            }
            let projection = generate_projection(&cfg.projection_spec(dim))?;
            (Arc::new(remote), train, test, projection, None)
        }
    };
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let few_shot = few_shot_select(&train_pool, cfg.per_class, derive_seed(cfg.seed, "few-shot", 0, 0))?;
    let shards = dirichlet_partition(
        &few_shot,
        &PartitionSpec {
            num_clients: cfg.clients,
            alpha: cfg.alpha,
            seed: derive_seed(cfg.seed, "partition", 0, 0),
            mode: cfg.partition,
        },
    )?;
    Ok(Setup { oracle, projection, shards, test, floor })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<RoundMetrics>,
    /// `(round, matrix)` for every evaluated round.
    pub confusion: Vec<(usize, Vec<Vec<usize>>)>,
    pub final_distribution: SearchDistribution,
    pub projection: Option<ProjectionSpec>,
    pub floor: Option<f64>,
}

impl RunOutcome {
    /// Accuracy of the last evaluated row.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.test_accuracy)
    }

    pub fn metrics_csv(&self) -> String {
        metrics::metrics_csv(&self.rows)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let setup = prepare(cfg)?;
    run_with(cfg, &setup)
}

/// The round loop: broadcast, parallel local rounds, aggregation, evaluation.
pub fn run_with(cfg: &ExperimentConfig, setup: &Setup) -> Result<RunOutcome> {
    cfg.validate()?;
    let dim = cfg.sub_dim;
    if setup.projection.sub_dim() != dim {
        return Err(Error::invalid("projection does not match sub_dim"));
    }
    let client_cfg = cfg.client_config();
    let clients = setup.shards.len();
    let params = server_params(dim, clients, cfg.weights).map(|mut p| {
        p.eigen_refresh = cfg.eigen_refresh;
        p
    })?;
    let spec = setup.projection.spec().copied();
    let uplink = accounting::uplink_floats(cfg.aggregator, dim as u64, cfg.local_iterations as u64);
    let downlink = accounting::downlink_floats(dim as u64);

    let mut dist = SearchDistribution::new(dim, &vec![0.0; dim], cfg.sigma0)?;
    let mut rows = Vec::with_capacity(cfg.rounds + 1);
    let mut confusion = Vec::new();

    let mut evaluate = |round: usize, dist: &SearchDistribution| -> Result<(Option<f64>, Option<f64>)> {
        if !round.is_multiple_of(cfg.eval_stride) && round != cfg.rounds {
            return Ok((None, None));
        }
        let prompt = setup.projection.project(dist.mean())?;
        let report = setup.oracle.evaluate(&prompt, &setup.test)?;
        confusion.push((round, confusion_matrix(setup.oracle.as_ref(), &prompt, &setup.test)?));
        Ok((Some(report.accuracy), Some(report.loss)))
    };

    let (acc, loss) = evaluate(0, &dist).map_err(|e| Error::Experiment { round: 0, source: Box::new(e) })?;
    rows.push(RoundMetrics {
        round: 0,
        test_accuracy: acc,
        test_loss: loss,
        broadcast_sigma: dist.step(),
        corrected_sigma: None,
        next_sigma: dist.step(),
        local_losses: Vec::new(),
        uplink_floats: 0,
        downlink_floats: 0,
    });

    for t in 0..cfg.rounds {
        let stamp = |e: Error| Error::Experiment { round: t, source: Box::new(e) };
        let broadcast = Broadcast::from_distribution(&dist, t as u64, spec);
        let mut locals: Vec<LocalRound> = setup
            .shards
            .par_iter()
            .map(|shard| run_local_round(&broadcast, shard, setup.oracle.as_ref(), &setup.projection, &client_cfg))
            .collect::<Result<_>>()
            .map_err(stamp)?;
        locals.sort_by_key(|l| l.result.client_id);
        let results: Vec<_> = locals.iter().map(|l| l.result.clone()).collect();

        let (next, corrected) = match cfg.aggregator {
            AggregatorKind::FedBpt => {
                let (next, used) =
                    aggregate_fedbpt_with(&dist, &results, &params, cfg.population, cfg.server_step).map_err(stamp)?;
                (next, Some(used))
            }
            AggregatorKind::FedAvgBbt => {
                let states: Vec<_> = locals
                    .iter()
                    .map(|l| LocalState::from_distribution(&l.final_distribution, l.result.sample_count))
                    .collect();
                (aggregate_fedavg_bbt(&states, dist.generation() + 1).map_err(stamp)?, None)
            }
        };
        let (acc, loss) = evaluate(t + 1, &next).map_err(stamp)?;
        rows.push(RoundMetrics {
            round: t + 1,
            test_accuracy: acc,
            test_loss: loss,
            broadcast_sigma: broadcast.step,
            corrected_sigma: corrected,
            next_sigma: next.step(),
            local_losses: results.iter().map(|r| r.local_loss).collect(),
            uplink_floats: uplink,
            downlink_floats: downlink,
        });
        log::info!(
            "round {}: accuracy {} sigma {:.4e}",
            t + 1,
            acc.map_or("-".into(), |a| format!("{a:.4}")),
            next.step()
        );
        dist = next;
    }

    Ok(RunOutcome { rows, confusion, final_distribution: dist, projection: spec, floor: setup.floor })
}

/// Writes `metrics.csv`, `confusion_round<t>.json`, `final_z.json`,
/// `accuracy.svg` and the resolved `config.json` into `dir`.
pub fn write_artifacts(outcome: &RunOutcome, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), outcome.metrics_csv())?;
    for (round, matrix) in &outcome.confusion {
        let doc = metrics::ConfusionFile { round: *round, matrix: matrix.clone() };
        std::fs::write(dir.join(format!("confusion_round{round}.json")), serde_json::to_string_pretty(&doc)?)?;
    }
    if let Some(projection) = outcome.projection {
        let z = outcome.final_distribution.mean().to_vec();
        let doc = metrics::FinalZ { d: z.len(), z, projection };
        std::fs::write(dir.join("final_z.json"), serde_json::to_string_pretty(&doc)?)?;
    }
    let points: Vec<(usize, f64)> = outcome.rows.iter().filter_map(|r| r.test_accuracy.map(|a| (r.round, a))).collect();
    std::fs::write(dir.join("accuracy.svg"), metrics::accuracy_svg(&points, "test accuracy"))?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

/// Repeated local rounds on one shard with no server in between: each round
/// starts from the previous round's final local distribution.
pub fn tune_single_client(
    shard: &Shard,
    oracle: &dyn Oracle,
    projection: &Projection,
    cfg: &ClientRoundConfig,
    sigma0: f64,
    rounds: usize,
) -> Result<SearchDistribution> {
    let dim = projection.sub_dim();
    let mut dist = SearchDistribution::new(dim, &vec![0.0; dim], sigma0)?;
    for t in 0..rounds {
        let broadcast = Broadcast::from_distribution(&dist, t as u64, projection.spec().copied());
        dist = run_local_round(&broadcast, shard, oracle, projection, cfg)?.final_distribution;
    }
    Ok(dist)
}
