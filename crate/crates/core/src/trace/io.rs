//! Benchmark files: the canonical one-record-per-line format and two small
//! converters (GSM8K-style open-ended and a generic multiple-choice layout).

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use super::{extract_final_answer, AnswerOption, BenchmarkItem, CandidateTrace, TaskType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchmarkFormat {
    /// Canonical records; every item must carry at least one candidate.
    Canonical,
    /// Canonical records whose `candidates` may be missing or empty (the
    /// input of candidate generation).
    Questions,
    /// `{"question", "answer"}` lines where the gold answer follows `####`.
    Gsm8k,
    /// `{"question", "options", "answer"}` lines; options are a list of
    /// strings (labelled A, B, ...) or of `{label, text}` objects and the
    /// answer is a label or a 0-based index.
    MultipleChoice,
}

impl std::str::FromStr for BenchmarkFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical" => Ok(Self::Canonical),
            "questions" => Ok(Self::Questions),
            "gsm8k" => Ok(Self::Gsm8k),
            "multiple_choice" | "mc" => Ok(Self::MultipleChoice),
            other => Err(format!("unknown benchmark format `{other}`")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: invalid record: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    Field { line: usize, field: &'static str, message: String },
    #[error("line {line}: duplicate item_id `{item_id}` (first seen on line {first_line})")]
    DuplicateId { line: usize, item_id: String, first_line: usize },
}

fn field_err(line: usize, field: &'static str, message: impl Into<String>) -> LoadError {
    LoadError::Field { line, field, message: message.into() }
}

/// Read and validate a benchmark file.
pub fn load_benchmark(path: &Path, format: BenchmarkFormat) -> Result<Vec<BenchmarkItem>, LoadError> {
    let text = fs::read_to_string(path)
        .map_err(|source| LoadError::Io { path: path.display().to_string(), source })?;
    parse_benchmark(&text, format)
}

/// Parse benchmark records from text. Blank lines are ignored; line numbers
/// in errors are 1-based.
pub fn parse_benchmark(text: &str, format: BenchmarkFormat) -> Result<Vec<BenchmarkItem>, LoadError> {
    let mut items = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw_line)
            .map_err(|e| LoadError::Syntax { line, message: e.to_string() })?;
        let Value::Object(obj) = value else {
            return Err(LoadError::Syntax { line, message: "expected a JSON object".into() });
        };
        let item = match format {
            BenchmarkFormat::Canonical => parse_canonical(&obj, line, true)?,
            BenchmarkFormat::Questions => parse_canonical(&obj, line, false)?,
            BenchmarkFormat::Gsm8k => parse_gsm8k(&obj, line)?,
            BenchmarkFormat::MultipleChoice => parse_multiple_choice(&obj, line)?,
        };
        if let Some(&first_line) = seen.get(&item.item_id) {
            return Err(LoadError::DuplicateId { line, item_id: item.item_id, first_line });
        }
        seen.insert(item.item_id.clone(), line);
        items.push(item);
    }
    Ok(items)
}

fn req_str(obj: &Map<String, Value>, line: usize, field: &'static str) -> Result<String, LoadError> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(field_err(line, field, "expected a string")),
        None => Err(field_err(line, field, "missing")),
    }
}

fn opt_str(obj: &Map<String, Value>, line: usize, field: &'static str) -> Result<Option<String>, LoadError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(field_err(line, field, "expected a string")),
    }
}

fn parse_canonical(
    obj: &Map<String, Value>,
    line: usize,
    require_candidates: bool,
) -> Result<BenchmarkItem, LoadError> {
    const KNOWN: &[&str] =
        &["item_id", "question", "task_type", "options", "gold_answer", "candidates"];
    if let Some(unknown) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(LoadError::Syntax { line, message: format!("unknown field `{unknown}`") });
    }
    let item_id = req_str(obj, line, "item_id")?;
    if item_id.is_empty() {
        return Err(field_err(line, "item_id", "must not be empty"));
    }
    let question = req_str(obj, line, "question")?;
    let task_type = match req_str(obj, line, "task_type")?.as_str() {
        "open_ended" => TaskType::OpenEnded,
        "multiple_choice" => TaskType::MultipleChoice,
        other => {
            return Err(field_err(
                line,
                "task_type",
                format!("expected `open_ended` or `multiple_choice`, got `{other}`"),
            ))
        }
    };
    let options = match obj.get("options") {
        None | Some(Value::Null) => None,
        Some(Value::Array(arr)) => Some(
            arr.iter()
                .map(|o| parse_labelled_option(o, line))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        Some(_) => return Err(field_err(line, "options", "expected an array")),
    };
    let gold_answer = req_str(obj, line, "gold_answer")?;
    let candidates = match obj.get("candidates") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(arr)) => arr
            .iter()
            .map(|c| parse_candidate(c, line, task_type))
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(field_err(line, "candidates", "expected an array")),
    };
    if require_candidates && candidates.is_empty() {
        return Err(field_err(line, "candidates", "at least one candidate is required"));
    }
    let item = BenchmarkItem { item_id, question, task_type, options, gold_answer, candidates };
    validate_options(&item, line)?;
    Ok(item)
}

fn parse_labelled_option(value: &Value, line: usize) -> Result<AnswerOption, LoadError> {
    let Value::Object(o) = value else {
        return Err(field_err(line, "options", "each option must be an object {label, text}"));
    };
    match (o.get("label"), o.get("text")) {
        (Some(Value::String(label)), Some(Value::String(text))) if !label.is_empty() => {
            Ok(AnswerOption { label: label.clone(), text: text.clone() })
        }
        _ => Err(field_err(line, "options", "each option needs string `label` and `text`")),
    }
}

fn parse_candidate(value: &Value, line: usize, task_type: TaskType) -> Result<CandidateTrace, LoadError> {
    let Value::Object(o) = value else {
        return Err(field_err(line, "candidates", "each candidate must be an object {text, final_answer?}"));
    };
    if let Some(unknown) = o.keys().find(|k| !matches!(k.as_str(), "text" | "final_answer")) {
        return Err(field_err(line, "candidates", format!("unknown candidate field `{unknown}`")));
    }
    let text = match o.get("text") {
        Some(Value::String(s)) => s.clone(),
        _ => return Err(field_err(line, "candidates", "candidate `text` must be a string")),
    };
    let stored = match o.get("final_answer") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(field_err(line, "candidates", "candidate `final_answer` must be a string")),
    };
    let mut trace = CandidateTrace::new(text, task_type);
    if stored.is_some() {
        trace.final_answer = stored;
    }
    Ok(trace)
}

fn validate_options(item: &BenchmarkItem, line: usize) -> Result<(), LoadError> {
    match (item.task_type, &item.options) {
        (TaskType::OpenEnded, Some(_)) => {
            Err(field_err(line, "options", "not allowed on an open_ended item"))
        }
        (TaskType::MultipleChoice, None) => {
            Err(field_err(line, "options", "required on a multiple_choice item"))
        }
        (TaskType::MultipleChoice, Some(options)) => {
            let mut labels = HashSet::new();
            for o in options {
                if !labels.insert(o.label.as_str()) {
                    return Err(field_err(line, "options", format!("duplicate label `{}`", o.label)));
                }
            }
            if !labels.contains(item.gold_answer.as_str()) {
                return Err(field_err(
                    line,
                    "gold_answer",
                    format!("`{}` is not one of the option labels", item.gold_answer),
                ));
            }
            Ok(())
        }
        (TaskType::OpenEnded, None) => Ok(()),
    }
}

fn parse_gsm8k(obj: &Map<String, Value>, line: usize) -> Result<BenchmarkItem, LoadError> {
    let question = req_str(obj, line, "question")?;
    let answer = req_str(obj, line, "answer")?;
    let (_, gold) = answer
        .rsplit_once("####")
        .ok_or_else(|| field_err(line, "answer", "missing `####` gold-answer marker"))?;
    let gold = gold.trim();
    if gold.is_empty() {
        return Err(field_err(line, "answer", "empty gold answer after `####`"));
    }
    let item_id = opt_str(obj, line, "id")?.unwrap_or_else(|| format!("gsm8k-{line}"));
    Ok(BenchmarkItem {
        item_id,
        question,
        task_type: TaskType::OpenEnded,
        options: None,
        gold_answer: gold.to_owned(),
        candidates: Vec::new(),
    })
}

fn parse_multiple_choice(obj: &Map<String, Value>, line: usize) -> Result<BenchmarkItem, LoadError> {
    let question = req_str(obj, line, "question")?;
    let options: Vec<AnswerOption> = match obj.get("options") {
        Some(Value::Array(arr)) if !arr.is_empty() => arr
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                Value::String(text) if i < 26 => Ok(AnswerOption {
                    label: char::from(b'A' + i as u8).to_string(),
                    text: text.clone(),
                }),
                Value::String(_) => Err(field_err(line, "options", "more than 26 options")),
                other => parse_labelled_option(other, line),
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(field_err(line, "options", "expected a non-empty array")),
        None => return Err(field_err(line, "options", "missing")),
    };
    let gold_answer = match obj.get("answer") {
        Some(Value::String(s)) => s.trim().to_owned(),
        Some(Value::Number(n)) => {
            let idx = n
                .as_u64()
                .filter(|&i| (i as usize) < options.len())
                .ok_or_else(|| field_err(line, "answer", "index out of range"))?;
            options[idx as usize].label.clone()
        }
        Some(_) => return Err(field_err(line, "answer", "expected a label or an index")),
        None => return Err(field_err(line, "answer", "missing")),
    };
    let item_id = opt_str(obj, line, "id")?.unwrap_or_else(|| format!("mc-{line}"));
    let item = BenchmarkItem {
        item_id,
        question,
        task_type: TaskType::MultipleChoice,
        options: Some(options),
        gold_answer,
        candidates: Vec::new(),
    };
    validate_options(&item, line)?;
    Ok(item)
}

#[derive(Serialize)]
struct RecordOut<'a> {
    item_id: &'a str,
    question: &'a str,
    task_type: TaskType,
    #[serde(skip_serializing_if = "Option::is_none")]
    options: Option<&'a [AnswerOption]>,
    gold_answer: &'a str,
    candidates: Vec<CandidateOut<'a>>,
}

#[derive(Serialize)]
struct CandidateOut<'a> {
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_answer: Option<&'a str>,
}

/// Serialise an item as one canonical record (without trailing newline).
/// Stored final answers are written only when they differ from what
/// extraction would produce.
pub fn item_to_record(item: &BenchmarkItem) -> String {
    let record = RecordOut {
        item_id: &item.item_id,
        question: &item.question,
        task_type: item.task_type,
        options: item.options.as_deref(),
        gold_answer: &item.gold_answer,
        candidates: item
            .candidates
            .iter()
            .map(|c| CandidateOut {
                text: &c.raw_text,
                final_answer: c
                    .final_answer
                    .as_deref()
                    .filter(|a| extract_final_answer(&c.raw_text, item.task_type).as_deref() != Some(*a)),
            })
            .collect(),
    };
    serde_json::to_string(&record).expect("record serialisation cannot fail")
}

pub fn write_benchmark(path: &Path, items: &[BenchmarkItem]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        writeln!(out, "{}", item_to_record(item))?;
    }
    out.flush()
}
