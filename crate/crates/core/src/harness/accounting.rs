//! Per-round message sizes.
//!
//! FedBPT uploads `z`, the `I` local step lengths and the local loss, and
//! downloads `z`, `C` and `sigma`. The direct-averaging baseline also uploads
//! its final local step and covariance.

use serde::Serialize;

use crate::server::AggregatorKind;

pub const BYTES_PER_FLOAT: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Baseline {
    pub name: String,
    pub params: u64,
}

impl Baseline {
    pub fn new(name: impl Into<String>, params: u64) -> Self {
        Self { name: name.into(), params }
    }
}

/// Trainable-parameter counts of the gradient-based prompt baselines on a
/// 355M-parameter masked LM.
pub fn default_baselines() -> Vec<Baseline> {
    vec![Baseline::new("FedPrompt", 51_000), Baseline::new("FedP-tuning", 15_000_000)]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineRatio {
    pub name: String,
    pub params: u64,
    /// `params / trainable_params`.
    pub ratio: f64,
    /// Set when the division is exact.
    pub exact_ratio: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommReport {
    pub aggregator: AggregatorKind,
    pub trainable_params: u64,
    pub uplink_floats: u64,
    pub downlink_floats: u64,
    /// Bytes of the trainable vector alone.
    pub trainable_bytes: u64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub baselines: Vec<BaselineRatio>,
}

pub fn uplink_floats(aggregator: AggregatorKind, sub_dim: u64, local_iterations: u64) -> u64 {
    let base = sub_dim + local_iterations + 1;
    match aggregator {
        AggregatorKind::FedBpt => base,
        AggregatorKind::FedAvgBbt => base + 1 + sub_dim * sub_dim,
    }
}

pub fn downlink_floats(sub_dim: u64) -> u64 {
    sub_dim + sub_dim * sub_dim + 1
}

pub fn comm_accounting(
    aggregator: AggregatorKind,
    sub_dim: u64,
    local_iterations: u64,
    baselines: &[Baseline],
) -> CommReport {
    let up = uplink_floats(aggregator, sub_dim, local_iterations);
    let down = downlink_floats(sub_dim);
    CommReport {
        aggregator,
        trainable_params: sub_dim,
        uplink_floats: up,
        downlink_floats: down,
        trainable_bytes: sub_dim * BYTES_PER_FLOAT,
        uplink_bytes: up * BYTES_PER_FLOAT,
        downlink_bytes: down * BYTES_PER_FLOAT,
        baselines: baselines
            .iter()
            .map(|b| BaselineRatio {
                name: b.name.clone(),
                params: b.params,
                ratio: b.params as f64 / sub_dim as f64,
                exact_ratio: (sub_dim > 0 && b.params % sub_dim == 0).then(|| b.params / sub_dim),
            })
            .collect(),
    }
}
