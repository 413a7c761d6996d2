//! Benchmark items, candidate traces and their reasoning steps.

mod answer;
mod io;
mod segment;

pub use answer::extract_final_answer;
pub use io::{
    item_to_record, load_benchmark, parse_benchmark, write_benchmark, BenchmarkFormat, LoadError,
};
pub use segment::{segment_spans, segment_trace, ABBREVIATIONS};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    OpenEnded,
    MultipleChoice,
}

impl TaskType {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::OpenEnded => "open_ended",
            TaskType::MultipleChoice => "multiple_choice",
        }
    }
}

/// A labelled answer option of a multiple-choice item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: String,
    pub text: String,
}

/// One contiguous piece of a candidate's text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningStep {
    pub text: String,
    /// Byte offsets `(start, end)` into the trace's raw text.
    pub char_span: (usize, usize),
    pub index: usize,
}

/// One sampled output: its raw text, the steps that partition it and the
/// extracted final answer.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateTrace {
    pub raw_text: String,
    pub steps: Vec<ReasoningStep>,
    pub final_answer: Option<String>,
}

impl CandidateTrace {
    /// Segment `raw_text` and extract its final answer.
    pub fn new(raw_text: impl Into<String>, task_type: TaskType) -> Self {
        let raw_text = raw_text.into();
        let steps = segment_trace(&raw_text);
        let final_answer = extract_final_answer(&raw_text, task_type);
        Self { raw_text, steps, final_answer }
    }

    /// Build a trace from step texts without re-segmenting them. The raw text
    /// is their concatenation and spans are recomputed.
    pub fn from_step_texts<I, S>(texts: I, final_answer: Option<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut raw_text = String::new();
        let mut steps = Vec::new();
        for (index, text) in texts.into_iter().enumerate() {
            let text = text.into();
            let start = raw_text.len();
            raw_text.push_str(&text);
            steps.push(ReasoningStep { char_span: (start, raw_text.len()), text, index });
        }
        Self { raw_text, steps, final_answer }
    }

    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    /// True when the trace has no non-whitespace content.
    pub fn is_blank(&self) -> bool {
        self.raw_text.trim().is_empty()
    }
}

/// A question with its gold answer and N candidate traces.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkItem {
    pub item_id: String,
    pub question: String,
    pub task_type: TaskType,
    pub options: Option<Vec<AnswerOption>>,
    pub gold_answer: String,
    pub candidates: Vec<CandidateTrace>,
}

impl BenchmarkItem {
    /// Options one per line as `(A) text`; empty for open-ended items.
    pub fn options_block(&self) -> String {
        self.options
            .iter()
            .flatten()
            .map(|o| format!("({}) {}", o.label, o.text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Conditioning text for scoring. Without a template this is the question,
    /// followed by the options block for multiple-choice items. A template
    /// may use `{question}` and `{options}`.
    pub fn query(&self, template: Option<&str>) -> String {
        match template {
            Some(t) => t.replace("{question}", &self.question).replace("{options}", &self.options_block()),
            None if self.options.is_some() => format!("{}\n{}", self.question, self.options_block()),
            None => self.question.clone(),
        }
    }
}
