//! Helpers shared by the integration tests: random table-LM fixtures, random
//! traces over their vocabulary, and a brute-force scorer that works from the
//! probability tables directly instead of going through the library.

#![allow(dead_code)]

pub mod http;

use std::collections::BTreeMap;
use std::path::PathBuf;

use ccb_core::backend::{TableLm, TableLmFixture};
use ccb_core::metrics::{Aggregation, MetricKind, MetricSpec, Mode, SignConvention};
use ccb_core::trace::{CandidateTrace, TaskType};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture(rel: &str) -> PathBuf {
    fixtures_dir().join(rel)
}

/// Small deterministic RNG wrapper.
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.0.next_u64() % n as u64) as usize
    }

    pub fn range(&mut self, lo: usize, hi_inclusive: usize) -> usize {
        lo + self.below(hi_inclusive - lo + 1)
    }

    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            let j = self.below(i + 1);
            v.swap(i, j);
        }
    }
}

const WORDS: &[&str] = &["ab", "cd", "ef", "gh"];

/// An n-gram table kept as plain data, independent of the library's parser.
#[derive(Debug, Clone)]
pub struct RandomLm {
    pub vocab: Vec<String>,
    pub order: usize,
    pub smoothing: f64,
    pub rows: BTreeMap<Vec<String>, Vec<f64>>,
}

fn random_row(rng: &mut Rng, v: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..v).map(|_| 0.05 + rng.unit()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

impl RandomLm {
    /// Vocabulary `<unk> . ab cd ...` of size `3..=6`, order `0..=2`.
    pub fn random(rng: &mut Rng) -> Self {
        let v = rng.range(3, 6);
        let mut vocab = vec!["<unk>".to_owned(), ".".to_owned()];
        vocab.extend(WORDS.iter().take(v - 2).map(|s| s.to_string()));
        let order = rng.range(0, 2);
        let smoothing = if rng.chance(0.3) { 0.05 } else { 0.0 };
        let mut rows = BTreeMap::new();
        rows.insert(Vec::new(), random_row(rng, v));
        let mut contexts: Vec<String> = vocab.clone();
        contexts.push("<s>".into());
        if order >= 1 {
            for c in &contexts {
                if rng.chance(0.7) {
                    rows.insert(vec![c.clone()], random_row(rng, v));
                }
            }
        }
        if order >= 2 {
            for _ in 0..6 {
                let a = contexts[rng.below(contexts.len())].clone();
                let b = vocab[rng.below(v)].clone();
                rows.insert(vec![a, b], random_row(rng, v));
            }
        }
        RandomLm { vocab, order, smoothing, rows }
    }

    pub fn uniform(v: usize) -> Self {
        let mut vocab = vec!["<unk>".to_owned(), ".".to_owned()];
        vocab.extend((0..v - 2).map(|i| format!("w{i}")));
        let mut rows = BTreeMap::new();
        rows.insert(Vec::new(), vec![1.0 / v as f64; v]);
        RandomLm { vocab, order: 0, smoothing: 0.0, rows }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("vocab {}\norder {}\n", self.vocab.join(" "), self.order);
        if self.smoothing != 0.0 {
            out.push_str(&format!("smoothing {:?}\n", self.smoothing));
        }
        for (ctx, probs) in &self.rows {
            let mut fields = ctx.clone();
            fields.extend(probs.iter().map(|p| format!("{p:?}")));
            out.push_str(&fields.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn backend(&self, id: &str) -> TableLm {
        let fixture = TableLmFixture::parse(&self.to_text()).expect("random fixture parses");
        TableLm::new(id, fixture).expect("random fixture is valid")
    }

    fn symbol(&self, word: &str) -> String {
        if self.vocab.iter().any(|v| v == word) {
            word.to_owned()
        } else {
            "<unk>".to_owned()
        }
    }

    /// Symbols of `text`: alphanumeric runs and single `.` characters.
    pub fn symbols(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for c in text.chars() {
            if c.is_alphanumeric() || c == '_' {
                word.push(c);
                continue;
            }
            if !word.is_empty() {
                out.push(self.symbol(&word));
                word.clear();
            }
            if !c.is_whitespace() {
                out.push(self.symbol(&c.to_string()));
            }
        }
        if !word.is_empty() {
            out.push(self.symbol(&word));
        }
        out
    }

    fn distribution(&self, history: &[String]) -> Vec<f64> {
        let v = self.vocab.len();
        let max = self.order.min(history.len());
        let raw = (0..=max)
            .rev()
            .find_map(|n| self.rows.get(&history[history.len() - n..]))
            .cloned()
            .unwrap_or_else(|| vec![1.0 / v as f64; v]);
        if self.smoothing == 0.0 {
            raw
        } else {
            raw.iter().map(|p| (p + self.smoothing) / (1.0 + v as f64 * self.smoothing)).collect()
        }
    }

    /// Per-token `(realized_logprob, entropy, mean_vocab_logprob)`,
    /// enumerating the whole distribution at each position.
    pub fn oracle(&self, context: &str, continuation: &str) -> Vec<[f64; 3]> {
        let mut history = vec!["<s>".to_owned()];
        history.extend(self.symbols(context));
        let mut out = Vec::new();
        for sym in self.symbols(continuation) {
            let dist = self.distribution(&history);
            let idx = self.vocab.iter().position(|s| *s == sym).unwrap();
            let mut entropy = 0.0;
            let mut mean = 0.0;
            for p in &dist {
                if *p > 0.0 {
                    entropy -= p * p.ln();
                }
                mean += p.ln();
            }
            out.push([dist[idx].ln(), entropy, mean / dist.len() as f64]);
            history.push(sym);
        }
        out
    }

    /// Metric value by brute force, or `None` when nothing is scorable.
    pub fn oracle_metric(
        &self,
        trace: &CandidateTrace,
        query: &str,
        kind: MetricKind,
        mode: Mode,
        sign: SignConvention,
        aggregation: Aggregation,
    ) -> Option<f64> {
        let col = match kind {
            MetricKind::LogLikelihood => 0,
            MetricKind::Entropy => 1,
            MetricKind::SelfCertainty => 2,
        };
        let groups: Vec<Vec<f64>> = match mode {
            Mode::Full => vec![self.oracle(query, &trace.raw_text).iter().map(|t| t[col]).collect()],
            Mode::StepMasked | Mode::QueryMasked => {
                let ctx = if mode == Mode::StepMasked { query } else { "" };
                trace.steps.iter().map(|s| self.oracle(ctx, &s.text).iter().map(|t| t[col]).collect()).collect()
            }
        };
        let groups: Vec<Vec<f64>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
        let n: usize = groups.iter().map(Vec::len).sum();
        if n == 0 {
            return None;
        }
        let literal = match (mode, aggregation) {
            (Mode::Full, _) | (_, Aggregation::TokenWeighted) => {
                groups.iter().flatten().sum::<f64>() / n as f64
            }
            (_, Aggregation::StepMean) => {
                groups.iter().map(|g| g.iter().sum::<f64>() / g.len() as f64).sum::<f64>() / groups.len() as f64
            }
        };
        let negate = sign == SignConvention::CertaintyAligned && kind != MetricKind::LogLikelihood;
        Some(if negate { -literal } else { literal })
    }

    /// A random sentence over the vocabulary, occasionally with an unknown
    /// word, ending in `.`.
    pub fn sentence(&self, rng: &mut Rng) -> String {
        let words: Vec<&String> = self.vocab.iter().skip(2).collect();
        let n = rng.range(1, 4);
        let mut s: Vec<String> = (0..n)
            .map(|_| if rng.chance(0.1) { "zz".to_owned() } else { words[rng.below(words.len())].clone() })
            .collect();
        let last = s.pop().unwrap();
        s.push(format!("{last}."));
        s.join(" ")
    }

    /// Random trace of `k` sentences; returns the trace and the step texts it
    /// is expected to segment into.
    pub fn trace(&self, rng: &mut Rng, k: usize) -> (CandidateTrace, Vec<String>) {
        let mut steps: Vec<String> = (0..k)
            .map(|_| {
                let sep = if rng.chance(0.2) { "\n" } else { " " };
                format!("{}{sep}", self.sentence(rng))
            })
            .collect();
        if rng.chance(0.5) {
            let last = steps.last_mut().unwrap();
            *last = last.trim_end().to_owned();
        }
        let raw: String = steps.concat();
        (CandidateTrace::new(raw, TaskType::OpenEnded), steps)
    }

    pub fn query(&self, rng: &mut Rng) -> String {
        if rng.chance(0.25) {
            String::new()
        } else {
            self.sentence(rng)
        }
    }
}

pub fn spec(kind: MetricKind, mode: Mode, sign: SignConvention) -> MetricSpec {
    MetricSpec::new(kind, mode, "lm").with_sign(sign)
}

/// Relative-or-absolute closeness.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Scores a continuation as one token whose log-probability is minus its
/// length in characters over 100, so shorter candidates win.
pub struct LengthBackend;

impl ccb_core::ScoringBackend for LengthBackend {
    fn id(&self) -> &str {
        "length"
    }

    fn fingerprint(&self) -> &str {
        "length-v1"
    }

    fn vocab_size(&self) -> usize {
        2
    }

    fn score(&self, request: &ccb_core::ScoreRequest) -> Result<ccb_core::ScoreResponse, ccb_core::backend::BackendError> {
        request.validate()?;
        let n = request.continuation.chars().count() as f64;
        Ok(ccb_core::ScoreResponse::from_tokens(
            vec![ccb_core::TokenScore {
                token_text: request.continuation.clone(),
                realized_logprob: -n / 100.0,
                entropy: 0.5,
                mean_vocab_logprob: -1.0,
            }],
            2,
        ))
    }
}
