//! Final-answer extraction from raw candidate text.

use std::sync::OnceLock;

use regex::Regex;

use super::TaskType;

const CUES: &[&str] = &["####", "final answer:", "answer:", "the answer is", "answer is"];

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(
            r"[-+\u{2212}]?\\d?frac\{\s*\d[\d,]*(?:\.\d+)?\s*\}\{\s*\d[\d,]*(?:\.\d+)?\s*\}|[-+\u{2212}]?\d[\d,]*(?:\.\d+)?(?:/\d+)?",
        ).unwrap())
}

fn label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([A-Ea-e])\)|\b([A-E])\b").unwrap())
}

/// Isolate the final answer string of a candidate, or `None` when no rule
/// matches.
///
/// Open-ended answers come from the last `\boxed{..}`, falling back to the
/// last number (a `\frac{a}{b}` counts as one) after the last final-answer
/// cue. Multiple-choice answers are the first option label (`A`-`E`,
/// optionally parenthesised) after the last cue, or a boxed label.
pub fn extract_final_answer(raw_text: &str, task_type: TaskType) -> Option<String> {
    match task_type {
        TaskType::OpenEnded => {
            if let Some(boxed) = last_boxed(raw_text) {
                return Some(boxed);
            }
            let tail = after_last_cue(raw_text)?;
            number_re()
                .find_iter(tail)
                .last()
                .map(|m| m.as_str().trim_end_matches(',').to_owned())
        }
        TaskType::MultipleChoice => {
            if let Some(boxed) = last_boxed(raw_text) {
                if let Some(label) = as_label(&boxed) {
                    return Some(label);
                }
            }
            let tail = after_last_cue(raw_text)?;
            let caps = label_re().captures(tail)?;
            let letter = caps.get(1).or_else(|| caps.get(2))?.as_str();
            Some(letter.to_ascii_uppercase())
        }
    }
}

fn as_label(s: &str) -> Option<String> {
    let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
    let mut chars = inner.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() && ('A'..='E').contains(&c.to_ascii_uppercase()) => {
            Some(c.to_ascii_uppercase().to_string())
        }
        _ => None,
    }
}

fn after_last_cue(text: &str) -> Option<&str> {
    let lower = text.to_lowercase();
    // Lowercasing can change byte lengths outside ASCII; fall back to the
    // original text for the search in that case.
    let haystack = if lower.len() == text.len() { lower.as_str() } else { text };
    CUES.iter()
        .filter_map(|cue| haystack.rfind(cue).map(|at| at + cue.len()))
        .max()
        .map(|end| &text[end..])
}

/// Content of the last `\boxed{...}` with balanced braces.
fn last_boxed(text: &str) -> Option<String> {
    const MARKER: &str = "\\boxed{";
    let start = text.rfind(MARKER)? + MARKER.len();
    let mut depth = 1usize;
    for (i, c) in text[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    let content = text[start..start + i].trim();
                    return (!content.is_empty()).then(|| content.to_owned());
                }
            }
            _ => {}
        }
    }
    None
}
