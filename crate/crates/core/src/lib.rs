//! Scoring, disruption and Best-of-N selection for chain-of-thought traces.
//!
//! The crate is organised along the experimental pipeline:
//!
//! - [`trace`]: benchmark items, candidate traces, step segmentation and
//!   final-answer extraction.
//! - [`backend`]: evaluator language models that return per-token
//!   distribution summaries (a deterministic table LM, a remote scoring
//!   client and a persistent score cache).
//! - [`metrics`]: self-certainty, log-likelihood and entropy under full,
//!   step-masked and query-masked conditioning, plus the contrastive metric.
//! - [`disruptions`]: shuffling, truncation and paraphrasing of traces, and
//!   the `DisruptionSpec` type that also names attention-level and evaluator swaps.
//! - [`selection`]: argmax selection, answer grading and accuracy.
//! - [`harness`]: experiment configuration, cell execution and reports.

pub mod backend;
pub mod disruptions;
pub mod harness;
pub mod metrics;
pub mod selection;
pub mod trace;

pub use backend::{ScoreRequest, ScoreResponse, ScoringBackend, TokenScore};
pub use metrics::{MetricKind, MetricSpec, MetricValue, Mode, SignConvention};
pub use trace::{BenchmarkItem, CandidateTrace, ReasoningStep, TaskType};
