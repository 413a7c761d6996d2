//! Best-of-N selection, answer grading and accuracy.

use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::BackendRegistry;
use crate::disruptions::{DisruptionSpec, Pipeline, TraceContext};
use crate::metrics::{self, MetricSpec, MetricValue};
use crate::trace::{extract_final_answer, BenchmarkItem, TaskType};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SelectionError {
    #[error("no scorable candidate")]
    NoScorableCandidate,
}

/// Index of the largest present score, lowest index on ties. NaN counts as
/// absent.
pub fn select_best(scores: &[Option<f64>]) -> Result<usize, SelectionError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        let Some(s) = s.filter(|s| !s.is_nan()) else { continue };
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i).ok_or(SelectionError::NoScorableCandidate)
}

/// Strip wrappers that do not change an answer's value.
fn normalize(s: &str) -> String {
    let mut s = s.trim().to_owned();
    loop {
        let before = s.clone();
        for (open, close) in [("\\boxed{", "}"), ("\\text{", "}"), ("\\(", "\\)"), ("\\[", "\\]"), ("$", "$"), ("{", "}")] {
            if let Some(inner) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
                s = inner.trim().to_owned();
            }
        }
        s = s.trim_end_matches(['.', '。']).trim().to_owned();
        if s == before {
            break;
        }
    }
    s.replace('\u{2212}', "-")
        .replace(',', "")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_decimal(s: &str) -> Option<BigRational> {
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if (int.is_empty() && frac.is_empty())
        || !int.bytes().all(|b| b.is_ascii_digit())
        || !frac.bytes().all(|b| b.is_ascii_digit())
    {
        return None;
    }
    let digits = format!("{int}{frac}");
    let numer = BigInt::from_str(&digits).ok()?;
    let denom = num_traits::pow(BigInt::from(10), frac.len());
    Some(BigRational::new(numer, denom))
}

/// Exact value of an answer written as an integer, decimal, `a/b` or
/// `\frac{a}{b}`, with an optional sign.
pub fn parse_rational(answer: &str) -> Option<BigRational> {
    let s = normalize(answer).replace(' ', "");
    let (negative, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(&s)),
    };
    let value = if let Some(rest) = body.strip_prefix("\\frac").or_else(|| body.strip_prefix("\\dfrac")) {
        let rest = rest.strip_prefix('{')?;
        let (n, rest) = rest.split_once('}')?;
        let d = rest.strip_prefix('{')?.strip_suffix('}')?;
        let (n, d) = (parse_rational(n)?, parse_rational(d)?);
        if d.is_zero() {
            return None;
        }
        n / d
    } else if let Some((n, d)) = body.split_once('/') {
        let (n, d) = (parse_decimal(n)?, parse_decimal(d)?);
        if d.is_zero() {
            return None;
        }
        n / d
    } else {
        parse_decimal(body)?
    };
    Some(if negative { -value } else { value })
}

fn choice_label(s: &str) -> String {
    let n = normalize(s);
    let n = n.trim_start_matches('(').trim_end_matches(')').trim();
    n.to_uppercase()
}

/// Whether `predicted` matches `gold`. Absent predictions are wrong.
pub fn grade(predicted: Option<&str>, gold: &str, task_type: TaskType) -> bool {
    let Some(predicted) = predicted else { return false };
    match task_type {
        TaskType::MultipleChoice => {
            let (p, g) = (choice_label(predicted), choice_label(gold));
            !p.is_empty() && p == g
        }
        TaskType::OpenEnded => match (parse_rational(predicted), parse_rational(gold)) {
            (Some(p), Some(g)) => p == g,
            _ => {
                let (p, g) = (normalize(predicted), normalize(gold));
                !p.is_empty() && p.to_lowercase() == g.to_lowercase()
            }
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub item_id: String,
    /// Absent when no candidate could be scored.
    pub chosen_index: Option<usize>,
    pub chosen_score: Option<f64>,
    pub scores: Vec<Option<f64>>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

/// Everything that names one experimental cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellId {
    pub benchmark: String,
    pub generator: String,
    /// The metric before disruptions are applied.
    pub metric: MetricSpec,
    pub disruption: Vec<DisruptionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub cell: CellId,
    /// The metric actually used after disruptions.
    pub effective_metric: MetricSpec,
    pub n_items: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    /// Items without a scorable candidate; they count as incorrect.
    pub failures: usize,
}

impl AccuracyReport {
    pub fn accuracy_of(n_correct: usize, n_items: usize) -> f64 {
        if n_items == 0 {
            0.0
        } else {
            n_correct as f64 / n_items as f64
        }
    }
}

/// Which text the chosen candidate is graded on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradingSource {
    /// The original candidate, whatever the scorer saw.
    #[default]
    Original,
    /// The disrupted text, re-extracted.
    Disrupted,
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateOptions {
    /// Template for the scoring context with `{question}` and `{options}`;
    /// `None` uses the raw question.
    pub context_template: Option<String>,
    pub grading: GradingSource,
}

/// Result of evaluating one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: AccuracyReport,
    /// Ordered by item id.
    pub results: Vec<SelectionResult>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvaluateError {
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error(transparent)]
    Disruption(#[from] crate::disruptions::DisruptionError),
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
}

fn evaluate_item(
    item: &BenchmarkItem,
    metric: &MetricSpec,
    pipeline: &Pipeline,
    registry: &BackendRegistry,
    options: &EvaluateOptions,
) -> SelectionResult {
    let mut diagnostics = Vec::new();
    let query = item.query(options.context_template.as_deref());
    let backend = registry.get(&metric.evaluator).expect("evaluator checked before evaluation");
    let mut disrupted = Vec::with_capacity(item.candidates.len());
    let mut scores = Vec::with_capacity(item.candidates.len());
    for (i, candidate) in item.candidates.iter().enumerate() {
        let ctx = TraceContext {
            item_id: &item.item_id,
            candidate_index: i,
            task_type: item.task_type,
            tokenizer: Some(backend.as_ref()),
        };
        let value: Option<MetricValue> = match pipeline.apply_trace(candidate, &ctx) {
            Ok(d) => {
                diagnostics.extend(d.diagnostics.into_iter().map(|m| format!("candidate {i}: {m}")));
                let v = match metrics::compute(&d.trace, &query, metric, backend.as_ref()) {
                    Ok(v) => v,
                    Err(e) => {
                        diagnostics.push(format!("candidate {i}: {e}"));
                        None
                    }
                };
                disrupted.push(Some(d.trace));
                v
            }
            Err(e) => {
                diagnostics.push(format!("candidate {i}: {e}"));
                disrupted.push(None);
                None
            }
        };
        scores.push(value.map(|v| v.value).filter(|v| !v.is_nan()));
    }
    let (chosen_index, correct) = match select_best(&scores) {
        Ok(i) => {
            let answer = match options.grading {
                GradingSource::Original => item.candidates[i].final_answer.clone(),
                GradingSource::Disrupted => disrupted[i]
                    .as_ref()
                    .and_then(|t| extract_final_answer(&t.raw_text, item.task_type)),
            };
            (Some(i), grade(answer.as_deref(), &item.gold_answer, item.task_type))
        }
        Err(e) => {
            diagnostics.push(e.to_string());
            (None, false)
        }
    };
    SelectionResult {
        item_id: item.item_id.clone(),
        chosen_score: chosen_index.and_then(|i| scores[i]),
        chosen_index,
        scores,
        correct,
        diagnostics,
    }
}

/// Run one cell: disrupt, score, select and grade every item. Items run in
/// parallel on the current rayon pool; the reduction is ordered by item id.
pub fn evaluate(
    items: &[BenchmarkItem],
    cell: CellId,
    registry: &BackendRegistry,
    options: &EvaluateOptions,
) -> Result<Evaluation, EvaluateError> {
    cell.metric.validate()?;
    let pipeline = Pipeline::new(cell.disruption.clone())?;
    let metric = pipeline.apply_metric(&cell.metric)?;
    metric.validate()?;
    registry.get(&metric.evaluator)?;
    let mut results: Vec<SelectionResult> =
        items.par_iter().map(|item| evaluate_item(item, &metric, &pipeline, registry, options)).collect();
    results.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    let n_correct = results.iter().filter(|r| r.correct).count();
    let failures = results.iter().filter(|r| r.chosen_index.is_none()).count();
    Ok(Evaluation {
        report: AccuracyReport {
            cell,
            effective_metric: metric,
            n_items: items.len(),
            n_correct,
            accuracy: AccuracyReport::accuracy_of(n_correct, items.len()),
            failures,
        },
        results,
    })
}

/// Fraction of items with at least one correct candidate.
pub fn pass_at_n(items: &[BenchmarkItem]) -> f64 {
    let hits = items
        .iter()
        .filter(|it| it.candidates.iter().any(|c| grade(c.final_answer.as_deref(), &it.gold_answer, it.task_type)))
        .count();
    AccuracyReport::accuracy_of(hits, items.len())
}
