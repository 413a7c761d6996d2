//! Disruptions applied before scoring.
//!
//! Data-level kinds (`shuffle`, `truncate`, `paraphrase`) rewrite the trace.
//! `attention_mask` and `query_mask` switch the metric to step-masked or
//! query-masked conditioning, and `evaluator_swap` scores with another
//! backend. A pipeline applies its specs left to right.

mod paraphrase;
mod shuffle;
mod truncate;

pub use paraphrase::{
    paraphrase_steps, ChatRewriter, IdentityRewriter, Paraphrased, RewriteError, Rewriter, RewriterConfig,
    SynonymRewriter, DEFAULT_PROMPT_TEMPLATE, REWRITER_KEY_ENV, SENTENCE_PLACEHOLDER,
};
pub use shuffle::{shuffle_permutation, shuffle_seed, shuffle_steps, SplitMix64};
pub use truncate::{char_prefix, truncate_trace, TruncateLimit, TruncateUnit};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, ScoringBackend};
use crate::metrics::{MetricSpec, Mode};
use crate::trace::{CandidateTrace, TaskType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisruptionSpec {
    None,
    Shuffle { seed: u64 },
    Truncate { limit: TruncateLimit, unit: TruncateUnit },
    Paraphrase { rewriter: RewriterConfig },
    AttentionMask,
    QueryMask,
    EvaluatorSwap { evaluator: String },
}

impl DisruptionSpec {
    pub fn kind_str(&self) -> &'static str {
        match self {
            DisruptionSpec::None => "none",
            DisruptionSpec::Shuffle { .. } => "shuffle",
            DisruptionSpec::Truncate { .. } => "truncate",
            DisruptionSpec::Paraphrase { .. } => "paraphrase",
            DisruptionSpec::AttentionMask => "attention_mask",
            DisruptionSpec::QueryMask => "query_mask",
            DisruptionSpec::EvaluatorSwap { .. } => "evaluator_swap",
        }
    }

    /// Whether this disruption rewrites trace text.
    pub fn is_data_level(&self) -> bool {
        matches!(
            self,
            DisruptionSpec::Shuffle { .. } | DisruptionSpec::Truncate { .. } | DisruptionSpec::Paraphrase { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DisruptionError {
    #[error("disruption config: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Where a trace comes from; shuffling seeds on it and truncation re-extracts
/// answers with its task type.
#[derive(Clone, Copy)]
pub struct TraceContext<'a> {
    pub item_id: &'a str,
    pub candidate_index: usize,
    pub task_type: TaskType,
    /// Needed only for token truncation.
    pub tokenizer: Option<&'a dyn ScoringBackend>,
}

/// The result of running a trace through a pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Disrupted {
    pub trace: CandidateTrace,
    pub diagnostics: Vec<String>,
}

fn mask_metric(spec: &MetricSpec, mode: Mode) -> Result<MetricSpec, DisruptionError> {
    if spec.alpha.is_some() {
        return Err(DisruptionError::Config("mask disruptions do not apply to contrastive metrics".into()));
    }
    Ok(MetricSpec { mode, ..spec.clone() })
}

/// Apply one spec. At most one of the trace and the metric spec changes.
pub fn apply(
    spec: &DisruptionSpec,
    trace: &CandidateTrace,
    metric: &MetricSpec,
    ctx: &TraceContext<'_>,
) -> Result<(CandidateTrace, MetricSpec), DisruptionError> {
    let pipeline = Pipeline::new(vec![spec.clone()])?;
    let metric = pipeline.apply_metric(metric)?;
    let disrupted = pipeline.apply_trace(trace, ctx)?;
    Ok((disrupted.trace, metric))
}

/// An ordered list of disruption specs with their rewriters built.
#[derive(Clone)]
pub struct Pipeline {
    specs: Vec<DisruptionSpec>,
    rewriters: Vec<Option<Arc<dyn Rewriter>>>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline").field("specs", &self.specs).finish()
    }
}

impl Pipeline {
    /// Validate the composition and build rewriters.
    pub fn new(specs: Vec<DisruptionSpec>) -> Result<Self, DisruptionError> {
        let count = |kind: &str| specs.iter().filter(|s| s.kind_str() == kind).count();
        if count("evaluator_swap") > 1 {
            return Err(DisruptionError::Config("more than one evaluator_swap in a pipeline".into()));
        }
        if count("attention_mask") + count("query_mask") > 1 {
            return Err(DisruptionError::Config("at most one attention_mask or query_mask per pipeline".into()));
        }
        let mut rewriters = Vec::with_capacity(specs.len());
        for spec in &specs {
            rewriters.push(match spec {
                DisruptionSpec::Truncate { limit, .. } => {
                    limit.validate().map_err(DisruptionError::Config)?;
                    None
                }
                DisruptionSpec::Paraphrase { rewriter } => {
                    Some(rewriter.build().map_err(DisruptionError::Config)?)
                }
                DisruptionSpec::EvaluatorSwap { evaluator } if evaluator.is_empty() => {
                    return Err(DisruptionError::Config("evaluator_swap needs an evaluator".into()));
                }
                _ => None,
            });
        }
        Ok(Self { specs, rewriters })
    }

    /// A pipeline that changes nothing.
    pub fn identity() -> Self {
        Self { specs: Vec::new(), rewriters: Vec::new() }
    }

    /// Use `rewriter` for every paraphrase step instead of the configured one.
    pub fn with_rewriter(mut self, rewriter: Arc<dyn Rewriter>) -> Self {
        for (spec, slot) in self.specs.iter().zip(&mut self.rewriters) {
            if matches!(spec, DisruptionSpec::Paraphrase { .. }) {
                *slot = Some(rewriter.clone());
            }
        }
        self
    }

    pub fn specs(&self) -> &[DisruptionSpec] {
        &self.specs
    }

    pub fn is_identity(&self) -> bool {
        self.specs.iter().all(|s| matches!(s, DisruptionSpec::None))
    }

    /// `none`, or the kinds joined with `+`.
    pub fn label(&self) -> String {
        let kinds: Vec<_> =
            self.specs.iter().filter(|s| !matches!(s, DisruptionSpec::None)).map(|s| s.kind_str()).collect();
        if kinds.is_empty() {
            "none".into()
        } else {
            kinds.join("+")
        }
    }

    pub fn apply_metric(&self, metric: &MetricSpec) -> Result<MetricSpec, DisruptionError> {
        let mut out = metric.clone();
        for spec in &self.specs {
            out = match spec {
                DisruptionSpec::AttentionMask => mask_metric(&out, Mode::StepMasked)?,
                DisruptionSpec::QueryMask => mask_metric(&out, Mode::QueryMasked)?,
                DisruptionSpec::EvaluatorSwap { evaluator } => MetricSpec { evaluator: evaluator.clone(), ..out },
                _ => out,
            };
        }
        Ok(out)
    }

    pub fn apply_trace(&self, trace: &CandidateTrace, ctx: &TraceContext<'_>) -> Result<Disrupted, DisruptionError> {
        let mut current = trace.clone();
        let mut diagnostics = Vec::new();
        for (spec, rewriter) in self.specs.iter().zip(&self.rewriters) {
            current = match spec {
                DisruptionSpec::Shuffle { seed } => {
                    shuffle_steps(&current, *seed, ctx.item_id, ctx.candidate_index)
                }
                DisruptionSpec::Truncate { limit, unit } => {
                    truncate_trace(&current, *limit, *unit, ctx.task_type, ctx.tokenizer)?
                }
                DisruptionSpec::Paraphrase { rewriter: config } => {
                    let r = rewriter.as_ref().expect("paraphrase rewriter built in Pipeline::new");
                    let p = paraphrase_steps(&current, config, r.as_ref());
                    diagnostics.extend(p.diagnostics);
                    p.trace
                }
                _ => continue,
            };
        }
        Ok(Disrupted { trace: current, diagnostics })
    }
}
