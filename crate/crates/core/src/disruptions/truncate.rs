//! Length truncation of traces.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backend::{BackendError, ScoreRequest, ScoringBackend, Statistic};
use crate::trace::{CandidateTrace, TaskType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncateUnit {
    /// Unicode scalar values.
    Characters,
    /// Tokens of the evaluator, counted with an empty context.
    Tokens,
}

impl TruncateUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            TruncateUnit::Characters => "characters",
            TruncateUnit::Tokens => "tokens",
        }
    }
}

/// How much of a trace to keep: a count, or a percentage of each trace's own
/// length written as `"50%"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TruncateLimit {
    Absolute(usize),
    Percent(f64),
}

impl TruncateLimit {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            TruncateLimit::Absolute(0) => Err("truncation limit must be positive".into()),
            TruncateLimit::Percent(p) if !(p > 0.0 && p <= 100.0) => {
                Err(format!("truncation percentage {p} outside (0, 100]"))
            }
            _ => Ok(()),
        }
    }

    /// The number of units kept from a text that is `len` units long.
    pub fn resolve(&self, len: usize) -> usize {
        match *self {
            TruncateLimit::Absolute(n) => n.min(len),
            TruncateLimit::Percent(p) => ((len as f64 * p / 100.0).floor() as usize).min(len),
        }
    }
}

impl fmt::Display for TruncateLimit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TruncateLimit::Absolute(n) => write!(f, "{n}"),
            TruncateLimit::Percent(p) => write!(f, "{p}%"),
        }
    }
}

impl FromStr for TruncateLimit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let limit = match s.strip_suffix('%') {
            Some(p) => TruncateLimit::Percent(p.trim().parse().map_err(|_| format!("bad percentage `{s}`"))?),
            None => TruncateLimit::Absolute(s.parse().map_err(|_| format!("bad truncation limit `{s}`"))?),
        };
        limit.validate()?;
        Ok(limit)
    }
}

impl Serialize for TruncateLimit {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            TruncateLimit::Absolute(n) => serializer.serialize_u64(*n as u64),
            TruncateLimit::Percent(_) => serializer.serialize_str(&self.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for TruncateLimit {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Int(n) => {
                let limit = TruncateLimit::Absolute(n as usize);
                limit.validate().map_err(serde::de::Error::custom)?;
                Ok(limit)
            }
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// The first `n` characters of `text`.
pub fn char_prefix(text: &str, n: usize) -> &str {
    match text.char_indices().nth(n) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

/// Keep a prefix of the trace, then re-segment it and re-extract its answer.
/// A limit at or above the trace length returns the trace unchanged.
/// `tokenizer` is needed only for [`TruncateUnit::Tokens`].
pub fn truncate_trace(
    trace: &CandidateTrace,
    limit: TruncateLimit,
    unit: TruncateUnit,
    task_type: TaskType,
    tokenizer: Option<&dyn ScoringBackend>,
) -> Result<CandidateTrace, BackendError> {
    let prefix = match unit {
        TruncateUnit::Characters => {
            let len = trace.raw_text.chars().count();
            let keep = limit.resolve(len);
            if keep >= len {
                return Ok(trace.clone());
            }
            char_prefix(&trace.raw_text, keep).to_owned()
        }
        TruncateUnit::Tokens => {
            if trace.raw_text.is_empty() {
                return Ok(trace.clone());
            }
            let backend = tokenizer.ok_or_else(|| {
                BackendError::InvalidRequest("token truncation needs an evaluator backend".into())
            })?;
            let request =
                ScoreRequest::new(backend.id(), "", trace.raw_text.as_str(), [Statistic::RealizedLogprob])?;
            let tokens = match backend.score(&request) {
                Ok(r) => r.tokens,
                Err(BackendError::EmptyContinuation) => return Ok(trace.clone()),
                Err(e) => return Err(e),
            };
            let keep = limit.resolve(tokens.len());
            if keep >= tokens.len() {
                return Ok(trace.clone());
            }
            tokens[..keep].iter().map(|t| t.token_text.as_str()).collect()
        }
    };
    Ok(CandidateTrace::new(prefix, task_type))
}
