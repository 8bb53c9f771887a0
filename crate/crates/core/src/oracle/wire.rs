//! JSON documents of the remote evaluation protocol.
//!
//! `GET /info` returns [`InfoResponse`]. `POST /evaluate` takes an
//! [`EvaluateRequest`] and answers 200 with [`EvaluateResponse`] or 400 with
//! [`ErrorResponse`].

use serde::{Deserialize, Serialize};

use super::{LossReport, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub prompt_dim: usize,
    pub num_classes: usize,
    pub model_name: String,
}

/// A sample carries either token ids or raw text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireSample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ids: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub label: usize,
}

impl From<&Sample> for WireSample {
    fn from(s: &Sample) -> Self {
        Self { token_ids: Some(s.token_ids.clone()), text: None, label: s.label }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRequest {
    pub prompt: Vec<f64>,
    pub samples: Vec<WireSample>,
    pub return_per_sample: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateResponse {
    pub loss: f64,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample_loss: Option<Vec<f64>>,
    pub num_classes: usize,
}

impl From<EvaluateResponse> for LossReport {
    fn from(r: EvaluateResponse) -> Self {
        LossReport {
            loss: r.loss,
            accuracy: r.accuracy,
            per_sample_loss: r.per_sample_loss,
            num_classes: r.num_classes,
        }
    }
}

impl From<&LossReport> for EvaluateResponse {
    fn from(r: &LossReport) -> Self {
        Self {
            loss: r.loss,
            accuracy: r.accuracy,
            per_sample_loss: r.per_sample_loss.clone(),
            num_classes: r.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}
