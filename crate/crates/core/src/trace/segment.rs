//! Rule-based segmentation of a reasoning trace into steps.
//!
//! A step ends after a whitespace run that either contains a newline or
//! directly follows a sentence terminator. A terminator is a run of `.`, `!`
//! or `?`, optionally followed by closing brackets or quotes. The whitespace
//! run belongs to the step it follows, so the steps always partition the
//! input byte-for-byte.
//!
//! A lone `.` is not a terminator when
//!
//! - the word in front of it is a listed abbreviation (`e.g.`, `Dr.`, ...), or
//! - the step so far is only a list number (`1. `, `12. `).
//!
//! Decimal points never split because a terminator has to be followed by
//! whitespace. A step must contain at least one non-whitespace character
//! before it can end, so leading blank lines join the first step and a
//! whitespace-only input is a single step.

use std::ops::Range;

use super::ReasoningStep;

/// Words that take an abbreviating period, compared case-insensitively
/// without the final `.`.
pub const ABBREVIATIONS: &[&str] = &[
    "al", "approx", "cf", "dr", "e.g", "eq", "eqs", "fig", "i.e", "jr", "mr", "mrs", "ms", "prof",
    "resp", "sec", "sr", "st", "vs",
];

const CLOSERS: &[char] = &[')', ']', '}', '"', '\'', '\u{201d}', '\u{2019}', '\u{00bb}'];

fn is_terminal_punct(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Split `raw_text` into steps whose texts concatenate back to `raw_text`.
pub fn segment_trace(raw_text: &str) -> Vec<ReasoningStep> {
    segment_spans(raw_text)
        .into_iter()
        .enumerate()
        .map(|(index, span)| ReasoningStep {
            text: raw_text[span.clone()].to_owned(),
            char_span: (span.start, span.end),
            index,
        })
        .collect()
}

/// Byte ranges of the steps of `text`.
pub fn segment_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    if text.is_empty() {
        return spans;
    }
    let bytes_len = text.len();
    let mut seg_start = 0;
    let mut has_content = false;
    let mut iter = text.char_indices().peekable();

    while let Some((i, c)) = iter.next() {
        if !c.is_whitespace() {
            has_content = true;
            continue;
        }
        let mut saw_newline = c == '\n';
        let mut run_end = i + c.len_utf8();
        while let Some(&(j, d)) = iter.peek() {
            if !d.is_whitespace() {
                break;
            }
            saw_newline |= d == '\n';
            run_end = j + d.len_utf8();
            iter.next();
        }
        if !has_content || run_end == bytes_len {
            continue;
        }
        if saw_newline || ends_with_terminator(&text[seg_start..i]) {
            spans.push(seg_start..run_end);
            seg_start = run_end;
            has_content = false;
        }
    }
    spans.push(seg_start..bytes_len);
    spans
}

/// Whether `segment` (a step's text up to a whitespace run) ends in a
/// sentence terminator.
fn ends_with_terminator(segment: &str) -> bool {
    let body = segment.trim_end_matches(CLOSERS);
    let punct_len: usize = body
        .chars()
        .rev()
        .take_while(|&c| is_terminal_punct(c))
        .map(char::len_utf8)
        .sum();
    if punct_len == 0 {
        return false;
    }
    let punct = &body[body.len() - punct_len..];
    if punct != "." {
        return true;
    }
    let before = &body[..body.len() - 1];
    !(is_abbreviation(before) || is_list_number(before))
}

fn is_abbreviation(before: &str) -> bool {
    let word_len: usize = before
        .chars()
        .rev()
        .take_while(|&c| c.is_alphabetic() || c == '.')
        .map(char::len_utf8)
        .sum();
    if word_len == 0 {
        return false;
    }
    let word = before[before.len() - word_len..].to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

fn is_list_number(before: &str) -> bool {
    let trimmed = before.trim_start();
    (1..=3).contains(&trimmed.len()) && trimmed.bytes().all(|b| b.is_ascii_digit())
}
