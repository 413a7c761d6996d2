//! Client for a model served over the scoring protocol.

use std::time::Duration;

use ureq::Agent;

use super::wire::{self, InfoResponse};
use super::{BackendError, ScoreRequest, ScoreResponse, ScoringBackend};

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    /// Retries after the first attempt for transport failures, 429 and 5xx.
    pub max_retries: u32,
    /// Backoff before the first retry; doubled per retry.
    pub initial_backoff: Duration,
    /// Upper bound on any single wait, including server `Retry-After`.
    pub max_backoff: Duration,
    pub timeout: Duration,
    pub api_key: Option<String>,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(250),
            max_backoff: Duration::from_secs(10),
            timeout: Duration::from_secs(120),
            api_key: None,
        }
    }
}

#[derive(Debug)]
pub struct RemoteBackend {
    id: String,
    base_url: String,
    agent: Agent,
    options: RemoteOptions,
    info: InfoResponse,
}

enum Attempt {
    Done(u16, String),
    Retry { message: String, retry_after: Option<Duration> },
}

impl RemoteBackend {
    /// Connect and read `/v1/info`.
    pub fn connect(
        id: impl Into<String>,
        base_url: impl Into<String>,
        options: RemoteOptions,
    ) -> Result<Self, BackendError> {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(options.timeout))
            .build()
            .into();
        let base_url = base_url.into().trim_end_matches('/').to_owned();
        let mut backend = RemoteBackend {
            id: id.into(),
            base_url,
            agent,
            options,
            info: InfoResponse { model_fingerprint: String::new(), vocab_size: 0, max_context: 0 },
        };
        let body = backend.call(None)?;
        backend.info = wire::decode_info(body.as_bytes()).map_err(|e| BackendError::Protocol(e.0))?;
        Ok(backend)
    }

    pub fn info(&self) -> &InfoResponse {
        &self.info
    }

    fn attempt(&self, body: Option<&str>) -> Attempt {
        let result = match body {
            None => {
                let mut req = self.agent.get(format!("{}/v1/info", self.base_url));
                if let Some(key) = &self.options.api_key {
                    req = req.header("authorization", format!("Bearer {key}"));
                }
                req.call()
            }
            Some(body) => {
                let mut req = self
                    .agent
                    .post(format!("{}/v1/score", self.base_url))
                    .header("content-type", "application/json");
                if let Some(key) = &self.options.api_key {
                    req = req.header("authorization", format!("Bearer {key}"));
                }
                req.send(body)
            }
        };
        let mut response = match result {
            Ok(r) => r,
            Err(e) => return Attempt::Retry { message: e.to_string(), retry_after: None },
        };
        let status = response.status().as_u16();
        let retry_after = response
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry { message: format!("reading body: {e}"), retry_after: None },
        };
        if status == 429 || (500..600).contains(&status) {
            let detail = wire::decode_error(text.as_bytes())
                .map(|d| format!("{}: {}", d.code, d.message))
                .unwrap_or_else(|| text.chars().take(200).collect());
            return Attempt::Retry { message: format!("status {status}: {detail}"), retry_after };
        }
        Attempt::Done(status, text)
    }

    /// Issue a request with retries; returns the body of a 2xx response.
    fn call(&self, body: Option<&str>) -> Result<String, BackendError> {
        let mut backoff = self.options.initial_backoff;
        let total = self.options.max_retries + 1;
        let mut last = (String::new(), None);
        for attempt in 1..=total {
            match self.attempt(body) {
                Attempt::Done(status, text) if (200..300).contains(&status) => return Ok(text),
                Attempt::Done(status, text) => {
                    let (code, message) = match wire::decode_error(text.as_bytes()) {
                        Some(d) => (d.code, d.message),
                        None => ("unknown".to_owned(), text.chars().take(200).collect()),
                    };
                    return Err(BackendError::Remote { status, code, message });
                }
                Attempt::Retry { message, retry_after } => {
                    tracing::debug!(backend = %self.id, attempt, %message, "scoring request failed");
                    last = (message, retry_after);
                    if attempt < total {
                        let wait = retry_after.unwrap_or(backoff).min(self.options.max_backoff);
                        std::thread::sleep(wait);
                        backoff = (backoff * 2).min(self.options.max_backoff);
                    }
                }
            }
        }
        Err(BackendError::Transport { message: last.0, attempts: total, retryable: true, retry_after: last.1 })
    }
}

impl ScoringBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn fingerprint(&self) -> &str {
        &self.info.model_fingerprint
    }

    fn vocab_size(&self) -> usize {
        self.info.vocab_size
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        request.validate()?;
        if request.entropy_top_p.is_some() {
            return Err(BackendError::Unsupported {
                backend: self.id.clone(),
                capability: "top-p entropy",
            });
        }
        let body = self.call(Some(&wire::encode_score_request(request)))?;
        let reply = wire::decode_score_response_for(body.as_bytes(), &request.continuation)
            .map_err(|e| BackendError::Protocol(e.0))?;
        if reply.model_fingerprint != self.info.model_fingerprint {
            return Err(BackendError::Protocol(format!(
                "model fingerprint changed from `{}` to `{}`",
                self.info.model_fingerprint, reply.model_fingerprint
            )));
        }
        if reply.response.vocab_size != self.info.vocab_size {
            return Err(BackendError::Protocol(format!(
                "vocab_size {} differs from advertised {}",
                reply.response.vocab_size, self.info.vocab_size
            )));
        }
        Ok(reply.response)
    }
}
