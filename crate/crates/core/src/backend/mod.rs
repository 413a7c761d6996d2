//! Evaluator language models.
//!
//! Every backend answers the same question: for a `(context, continuation)`
//! pair, what are the realized-token log-probability, the entropy and the
//! mean-over-vocabulary log-probability at each continuation token? These
//! three statistics are all the metrics need, so a deterministic table LM
//! and a remote model behind the scoring protocol are interchangeable.
//! Scoring under a smaller evaluator is only a matter of picking another
//! backend id.

mod cache;
mod remote;
mod table_lm;
pub mod wire;

pub use cache::{CacheKey, CacheStats, CachedBackend, ScoreCache, VerifyReport, CACHE_DIR_ENV};
pub use remote::{RemoteBackend, RemoteOptions};
pub use table_lm::{FixtureError, TableLm, TableLmFixture, BOS, STOP, UNK};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// One of the per-token statistics a caller can ask for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    RealizedLogprob,
    Entropy,
    MeanVocabLogprob,
}

impl Statistic {
    pub const ALL: [Statistic; 3] =
        [Statistic::RealizedLogprob, Statistic::Entropy, Statistic::MeanVocabLogprob];

    pub fn as_str(self) -> &'static str {
        match self {
            Statistic::RealizedLogprob => "realized_logprob",
            Statistic::Entropy => "entropy",
            Statistic::MeanVocabLogprob => "mean_vocab_logprob",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub backend_id: String,
    /// Conditioning text; empty means only the backend's start-of-sequence
    /// convention.
    pub context: String,
    pub continuation: String,
    pub needs: BTreeSet<Statistic>,
    /// Entropy over the renormalised top-p nucleus instead of the full
    /// distribution.
    pub entropy_top_p: Option<f64>,
}

impl ScoreRequest {
    pub fn new(
        backend_id: impl Into<String>,
        context: impl Into<String>,
        continuation: impl Into<String>,
        needs: impl IntoIterator<Item = Statistic>,
    ) -> Result<Self, BackendError> {
        let request = Self {
            backend_id: backend_id.into(),
            context: context.into(),
            continuation: continuation.into(),
            needs: needs.into_iter().collect(),
            entropy_top_p: None,
        };
        request.validate()?;
        Ok(request)
    }

    pub fn with_entropy_top_p(mut self, top_p: Option<f64>) -> Result<Self, BackendError> {
        self.entropy_top_p = top_p;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.continuation.is_empty() {
            return Err(BackendError::EmptyContinuation);
        }
        if self.needs.is_empty() {
            return Err(BackendError::InvalidRequest("needs must not be empty".into()));
        }
        if let Some(p) = self.entropy_top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(BackendError::InvalidRequest(format!("entropy top-p {p} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Distribution summary at one continuation token. All values are in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token_text: String,
    pub realized_logprob: f64,
    pub entropy: f64,
    /// `(1/V) * sum_j log p(j)`.
    pub mean_vocab_logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub tokens: Vec<TokenScore>,
    pub token_count: usize,
    pub vocab_size: usize,
}

/// Slack allowed on the sign and range checks of received statistics.
pub const STAT_TOLERANCE: f64 = 1e-9;

impl ScoreResponse {
    pub fn from_tokens(tokens: Vec<TokenScore>, vocab_size: usize) -> Self {
        Self { token_count: tokens.len(), tokens, vocab_size }
    }

    /// Check the response invariants against the continuation it answers.
    /// Violations are reported, never repaired.
    pub fn check(&self, continuation: &str) -> Result<(), String> {
        self.check_intrinsic()?;
        let rebuilt: String = self.tokens.iter().map(|t| t.token_text.as_str()).collect();
        if rebuilt != continuation {
            return Err("token texts do not reconstruct the continuation".into());
        }
        Ok(())
    }

    /// The invariants that do not depend on the request.
    pub fn check_intrinsic(&self) -> Result<(), String> {
        if self.vocab_size < 2 {
            return Err(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.tokens.is_empty() {
            return Err("no tokens".into());
        }
        if self.token_count != self.tokens.len() {
            return Err(format!(
                "token_count {} does not match {} tokens",
                self.token_count,
                self.tokens.len()
            ));
        }
        let max_entropy = (self.vocab_size as f64).ln() + STAT_TOLERANCE;
        for (i, t) in self.tokens.iter().enumerate() {
            if t.realized_logprob.is_nan() || t.realized_logprob > STAT_TOLERANCE {
                return Err(format!("token {i}: realized_logprob {} is not <= 0", t.realized_logprob));
            }
            if !(t.entropy >= -STAT_TOLERANCE && t.entropy <= max_entropy) {
                return Err(format!("token {i}: entropy {} outside [0, log V]", t.entropy));
            }
            if t.mean_vocab_logprob.is_nan() || t.mean_vocab_logprob > STAT_TOLERANCE {
                return Err(format!("token {i}: mean_vocab_logprob {} is not <= 0", t.mean_vocab_logprob));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Temperature {
    /// The zero-temperature limit: always take the most probable symbol.
    Greedy,
    Scaled(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub temperature: Temperature,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("empty continuation")]
    EmptyContinuation,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("backend `{backend}` does not support {capability}")]
    Unsupported { backend: String, capability: &'static str },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport {
        message: String,
        attempts: u32,
        retryable: bool,
        retry_after: Option<Duration>,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("remote error {status} ({code}): {message}")]
    Remote { status: u16, code: String, message: String },
}

/// A language model that can score continuations.
pub trait ScoringBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Identifies the model and its conventions; part of every cache key.
    fn fingerprint(&self) -> &str;

    fn vocab_size(&self) -> usize;

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError>;

    fn sample(&self, _context: &str, _params: &SamplingParams, _seed: u64) -> Result<String, BackendError> {
        Err(BackendError::Unsupported { backend: self.id().to_owned(), capability: "sampling" })
    }
}

impl fmt::Debug for dyn ScoringBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScoringBackend").field("id", &self.id()).finish()
    }
}

/// Backends by id.
#[derive(Default, Clone)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn ScoringBackend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, backend: Arc<dyn ScoringBackend>) {
        self.backends.insert(backend.id().to_owned(), backend);
    }

    pub fn get(&self, id: &str) -> Result<&Arc<dyn ScoringBackend>, BackendError> {
        self.backends.get(id).ok_or_else(|| BackendError::UnknownBackend(id.to_owned()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.backends.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }

    pub fn fingerprints(&self) -> impl Iterator<Item = &str> {
        self.backends.values().map(|b| b.fingerprint())
    }

    /// Route a request to the backend it names.
    pub fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        request.validate()?;
        self.get(&request.backend_id)?.score(request)
    }
}
