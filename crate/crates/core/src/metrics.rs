//! Probabilistic confidence metrics over a candidate trace.
//!
//! Three per-token statistics are averaged over the `n` scored tokens:
//!
//! | kind             | per-token statistic                  |
//! |------------------|--------------------------------------|
//! | `log_likelihood` | `log p(realized token)`              |
//! | `self_certainty` | `(1/V) * sum_j log p(j)`             |
//! | `entropy`        | `-sum_j p(j) log p(j)`               |
//!
//! Conditioning modes:
//!
//! - `full`: one call, context = query, continuation = the whole trace.
//! - `step_masked`: one call per step with context = query, so no step sees
//!   the steps before it.
//! - `query_masked`: one call per step with an empty context.
//!
//! Masked values are token-weighted: the sum over every token of every step
//! divided by the total token count. All sums are exactly rounded, so the
//! result does not depend on the order of the steps.
//!
//! Under [`SignConvention::CertaintyAligned`] entropy and self-certainty are
//! negated so that a larger value always means a more confident candidate.

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ScoreRequest, ScoringBackend, Statistic, TokenScore};
use crate::trace::{BenchmarkItem, CandidateTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    SelfCertainty,
    LogLikelihood,
    Entropy,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::SelfCertainty, MetricKind::LogLikelihood, MetricKind::Entropy];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::SelfCertainty => "self_certainty",
            MetricKind::LogLikelihood => "log_likelihood",
            MetricKind::Entropy => "entropy",
        }
    }

    pub fn statistic(self) -> Statistic {
        match self {
            MetricKind::SelfCertainty => Statistic::MeanVocabLogprob,
            MetricKind::LogLikelihood => Statistic::RealizedLogprob,
            MetricKind::Entropy => Statistic::Entropy,
        }
    }

    fn pick(self, t: &TokenScore) -> f64 {
        match self {
            MetricKind::SelfCertainty => t.mean_vocab_logprob,
            MetricKind::LogLikelihood => t.realized_logprob,
            MetricKind::Entropy => t.entropy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    StepMasked,
    QueryMasked,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::StepMasked, Mode::QueryMasked];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::StepMasked => "step_masked",
            Mode::QueryMasked => "query_masked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// Exactly the printed formulas.
    PaperLiteral,
    /// Entropy and self-certainty negated: larger is more confident.
    #[default]
    CertaintyAligned,
}

impl SignConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            SignConvention::PaperLiteral => "paper_literal",
            SignConvention::CertaintyAligned => "certainty_aligned",
        }
    }

    pub fn apply(self, kind: MetricKind, literal: f64) -> f64 {
        match (self, kind) {
            (SignConvention::CertaintyAligned, MetricKind::Entropy | MetricKind::SelfCertainty) => -literal,
            _ => literal,
        }
    }
}

/// How masked per-step results are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum over all tokens divided by the total token count.
    #[default]
    TokenWeighted,
    /// Unweighted mean of the per-step means (ablation only).
    StepMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub kind: MetricKind,
    /// For contrastive specs, the masked mode subtracted from the full value.
    pub mode: Mode,
    pub evaluator: String,
    #[serde(default)]
    pub sign: SignConvention,
    /// Contrastive weight; `None` for a plain metric.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Top-p nucleus for the entropy statistic; `None` is the full
    /// distribution.
    #[serde(default)]
    pub entropy_top_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("a contrastive metric needs a masked mode, got `full`")]
    ContrastiveNeedsMaskedMode,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl MetricSpec {
    pub fn new(kind: MetricKind, mode: Mode, evaluator: impl Into<String>) -> Self {
        Self {
            kind,
            mode,
            evaluator: evaluator.into(),
            sign: SignConvention::default(),
            alpha: None,
            aggregation: Aggregation::default(),
            entropy_top_p: None,
        }
    }

    pub fn with_sign(mut self, sign: SignConvention) -> Self {
        self.sign = sign;
        self
    }

    pub fn contrastive(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(MetricError::AlphaOutOfRange(a));
            }
            if self.mode == Mode::Full {
                return Err(MetricError::ContrastiveNeedsMaskedMode);
            }
        }
        Ok(())
    }

    /// Short display name, e.g. `self_certainty` or `self_certainty-contrastive`.
    pub fn metric_label(&self) -> String {
        match self.alpha {
            Some(_) => format!("{}-contrastive", self.kind.as_str()),
            None => self.kind.as_str().to_owned(),
        }
    }
}

/// Per-step partial sums of a masked computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPartial {
    pub index: usize,
    pub token_count: usize,
    /// Exactly rounded sum of the literal per-token statistic.
    pub sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    /// `n`: tokens behind the value (for contrastive values, the full pass).
    pub token_count: usize,
    /// `K`: steps of the trace.
    pub step_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_step: Option<Vec<StepPartial>>,
    /// Steps that tokenized to nothing and were left out.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_steps: Vec<usize>,
    /// Token count of the masked pass of a contrastive value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked_token_count: Option<usize>,
}

/// Exactly rounded floating-point summation (Shewchuk's algorithm, as in
/// Python's `math.fsum`). The result is independent of insertion order.
#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
    special: f64,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, mut x: f64) {
        if !x.is_finite() {
            self.special += x;
            return;
        }
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn value(&self) -> f64 {
        if self.special != 0.0 || self.special.is_nan() {
            return self.special;
        }
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }

    /// The sum divided by `n`. The rounded quotient is corrected by the
    /// exactly computed remainder, so the mean of `n` copies of `x` is `x`.
    pub fn mean(&self, n: usize) -> f64 {
        let d = n as f64;
        let q = self.value() / d;
        if !q.is_finite() {
            return q;
        }
        let p = q * d;
        let e = q.mul_add(d, -p);
        let mut rem = self.clone();
        rem.add(-p);
        rem.add(-e);
        q + rem.value() / d
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        iter.into_iter().for_each(|x| s.add(x));
        s
    }
}

fn request(spec: &MetricSpec, context: &str, continuation: &str) -> Result<ScoreRequest, BackendError> {
    let req = ScoreRequest::new(spec.evaluator.clone(), context, continuation, [spec.kind.statistic()])?;
    match (spec.kind, spec.entropy_top_p) {
        (MetricKind::Entropy, Some(p)) => req.with_entropy_top_p(Some(p)),
        _ => Ok(req),
    }
}

/// Score `continuation`; `Ok(None)` when it holds no tokens.
fn score_tokens(
    spec: &MetricSpec,
    backend: &dyn ScoringBackend,
    context: &str,
    continuation: &str,
) -> Result<Option<Vec<f64>>, BackendError> {
    if continuation.trim().is_empty() {
        return Ok(None);
    }
    match backend.score(&request(spec, context, continuation)?) {
        Ok(r) => Ok(Some(r.tokens.iter().map(|t| spec.kind.pick(t)).collect())),
        Err(BackendError::EmptyContinuation) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Metric over the whole trace conditioned on the query.
pub fn compute_full(
    trace: &CandidateTrace,
    query: &str,
    spec: &MetricSpec,
    backend: &dyn ScoringBackend,
) -> Result<Option<MetricValue>, MetricError> {
    spec.validate()?;
    let Some(stats) = score_tokens(spec, backend, query, &trace.raw_text)? else {
        return Ok(None);
    };
    let n = stats.len();
    let sum: ExactSum = stats.into_iter().collect();
    Ok(Some(MetricValue {
        value: spec.sign.apply(spec.kind, sum.mean(n)),
        token_count: n,
        step_count: trace.step_count(),
        per_step: None,
        skipped_steps: Vec::new(),
        masked_token_count: None,
    }))
}

/// Metric with every step scored in its own call, conditioned on the query
/// (`StepMasked`) or on nothing (`QueryMasked`).
pub fn compute_masked(
    trace: &CandidateTrace,
    query: &str,
    spec: &MetricSpec,
    backend: &dyn ScoringBackend,
    mode: Mode,
) -> Result<Option<MetricValue>, MetricError> {
    spec.validate()?;
    let context = match mode {
        Mode::StepMasked => query,
        Mode::QueryMasked => "",
        Mode::Full => return compute_full(trace, query, spec, backend),
    };
    let mut total = ExactSum::new();
    let mut n = 0;
    let mut partials = Vec::with_capacity(trace.steps.len());
    let mut skipped = Vec::new();
    for step in &trace.steps {
        match score_tokens(spec, backend, context, &step.text)? {
            Some(stats) => {
                let step_sum: ExactSum = stats.iter().copied().collect();
                stats.iter().for_each(|&x| total.add(x));
                n += stats.len();
                partials.push(StepPartial { index: step.index, token_count: stats.len(), sum: step_sum.value() });
            }
            None => skipped.push(step.index),
        }
    }
    if n == 0 {
        return Ok(None);
    }
    let literal = match spec.aggregation {
        Aggregation::TokenWeighted => total.mean(n),
        Aggregation::StepMean => {
            let means: ExactSum = partials.iter().map(|p| p.sum / p.token_count as f64).collect();
            means.mean(partials.len())
        }
    };
    Ok(Some(MetricValue {
        value: spec.sign.apply(spec.kind, literal),
        token_count: n,
        step_count: trace.step_count(),
        per_step: Some(partials),
        skipped_steps: skipped,
        masked_token_count: None,
    }))
}

/// `full - alpha * masked`, both under the same kind, evaluator and sign.
pub fn compute_contrastive(
    trace: &CandidateTrace,
    query: &str,
    spec: &MetricSpec,
    backend: &dyn ScoringBackend,
    alpha: f64,
    masked_mode: Mode,
) -> Result<Option<MetricValue>, MetricError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MetricError::AlphaOutOfRange(alpha));
    }
    if masked_mode == Mode::Full {
        return Err(MetricError::ContrastiveNeedsMaskedMode);
    }
    let base = MetricSpec { alpha: None, ..spec.clone() };
    let Some(full) = compute_full(trace, query, &base, backend)? else {
        return Ok(None);
    };
    let Some(masked) = compute_masked(trace, query, &base, backend, masked_mode)? else {
        return Ok(None);
    };
    let value = if alpha == 0.0 { full.value } else { full.value - alpha * masked.value };
    Ok(Some(MetricValue {
        value,
        token_count: full.token_count,
        step_count: full.step_count,
        per_step: masked.per_step,
        skipped_steps: masked.skipped_steps,
        masked_token_count: Some(masked.token_count),
    }))
}

/// Dispatch on `spec.mode` and `spec.alpha`.
pub fn compute(
    trace: &CandidateTrace,
    query: &str,
    spec: &MetricSpec,
    backend: &dyn ScoringBackend,
) -> Result<Option<MetricValue>, MetricError> {
    spec.validate()?;
    match spec.alpha {
        Some(alpha) => compute_contrastive(trace, query, spec, backend, alpha, spec.mode),
        None if spec.mode == Mode::Full => compute_full(trace, query, spec, backend),
        None => compute_masked(trace, query, spec, backend, spec.mode),
    }
}

/// Metric outcome for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub value: Option<MetricValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl CandidateScore {
    pub fn score(&self) -> Option<f64> {
        self.value.as_ref().map(|v| v.value).filter(|v| !v.is_nan())
    }
}

/// Score every candidate of `item` in order. Failures become absent values
/// with a diagnostic.
pub fn score_candidates(
    item: &BenchmarkItem,
    candidates: &[CandidateTrace],
    query: &str,
    spec: &MetricSpec,
    backend: &dyn ScoringBackend,
) -> Vec<CandidateScore> {
    candidates
        .iter()
        .enumerate()
        .map(|(i, c)| match compute(c, query, spec, backend) {
            Ok(Some(v)) => CandidateScore { value: Some(v), diagnostic: None },
            Ok(None) => CandidateScore {
                value: None,
                diagnostic: Some(format!("{}#{i}: no scorable tokens", item.item_id)),
            },
            Err(e) => CandidateScore { value: None, diagnostic: Some(format!("{}#{i}: {e}", item.item_id)) },
        })
        .collect()
}
