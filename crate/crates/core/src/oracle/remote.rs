use std::time::Duration;

use super::wire::{ErrorResponse, EvaluateRequest, EvaluateResponse, InfoResponse, WireSample};
use super::{LossReport, Oracle, Sample};
use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Oracle served over HTTP. The advertised prompt dimension is fetched once
/// at connect time and every prompt is checked against it locally.
#[derive(Debug, Clone)]
pub struct RemoteOracle {
    base_url: String,
    agent: ureq::Agent,
    info: InfoResponse,
    return_per_sample: bool,
}

impl RemoteOracle {
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self> {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        let base_url = endpoint.trim_end_matches('/').to_string();
        let info: InfoResponse = agent
            .get(&format!("{base_url}/info"))
            .call()
            .map_err(map_error)?
            .into_json()
            .map_err(|e| Error::Transport(format!("malformed /info response: {e}")))?;
        if info.prompt_dim == 0 || info.num_classes == 0 {
            return Err(Error::Transport(format!("remote advertised an empty model: {info:?}")));
        }
        Ok(Self { base_url, agent, info, return_per_sample: false })
    }

    /// Ask the server for per-sample losses on every call.
    pub fn with_per_sample(mut self, on: bool) -> Self {
        self.return_per_sample = on;
        self
    }

    pub fn info(&self) -> &InfoResponse {
        &self.info
    }
}

impl Oracle for RemoteOracle {
    fn prompt_dim(&self) -> usize {
        self.info.prompt_dim
    }

    fn num_classes(&self) -> usize {
        self.info.num_classes
    }

    fn evaluate(&self, prompt: &[f64], batch: &[Sample]) -> Result<LossReport> {
        if prompt.len() != self.info.prompt_dim {
            return Err(Error::invalid(format!(
                "prompt has length {}, remote expects {}",
                prompt.len(),
                self.info.prompt_dim
            )));
        }
        let request = EvaluateRequest {
            prompt: prompt.to_vec(),
            samples: batch.iter().map(WireSample::from).collect(),
            return_per_sample: self.return_per_sample,
        };
        let response: EvaluateResponse = self
            .agent
            .post(&format!("{}/evaluate", self.base_url))
            .send_json(&request)
            .map_err(map_error)?
            .into_json()
            .map_err(|e| Error::Transport(format!("malformed /evaluate response: {e}")))?;

        let report = LossReport::from(response);
        if !report.loss.is_finite() || report.loss < 0.0 || !(0.0..=1.0).contains(&report.accuracy) {
            return Err(Error::Transport(format!(
                "response out of range: loss={} accuracy={}",
                report.loss, report.accuracy
            )));
        }
        if !report.is_consistent(1e-9) {
            log::warn!("remote per-sample losses do not average to the reported loss {}", report.loss);
        }
        Ok(report)
    }
}

fn map_error(err: ureq::Error) -> Error {
    match err {
        ureq::Error::Status(code, response) => {
            let body = response.into_string().unwrap_or_default();
            match serde_json::from_str::<ErrorResponse>(&body) {
                Ok(e) => Error::RemoteRejection(e.error),
                Err(_) => Error::Transport(format!("HTTP {code}: {body}")),
            }
        }
        ureq::Error::Transport(t) => Error::Transport(t.to_string()),
    }
}
