//! Deterministic table-driven language model.
//!
//! Fixture file format:
//!
//! ```text
//! # lines starting with a lone `#` (or `#word`) are comments
//! vocab <unk> </s> a b c .
//! order 1
//! smoothing 0.01          (optional additive smoothing, default 0)
//! 0.1 0.1 0.2 0.2 0.2 0.2 (empty-context row: V probabilities)
//! a 0 0.05 0.05 0.8 0.05 0.05
//! <s> 0 0 0.5 0.5 0 0     (rows may condition on the start symbol)
//! ```
//!
//! A row holds up to `order` context symbols followed by exactly V
//! probabilities. The distribution for a position is the row of the longest
//! matching suffix of the history; when nothing matches it is uniform. The
//! history of every call starts with `<s>`, then the context symbols, then
//! the continuation prefix.
//!
//! Tokenization: a maximal alphanumeric run is one token; otherwise the
//! longest vocabulary symbol made of punctuation is taken, else a single
//! character. Whitespace is carried in front of the following token (and
//! trailing whitespace at the end of the text joins the last token), so token
//! texts concatenate back to the input. Unknown symbols map to `<unk>`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    BackendError, SamplingParams, ScoreRequest, ScoreResponse, ScoringBackend, Temperature,
    TokenScore,
};

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const STOP: &str = "</s>";

/// Tolerance on row sums.
const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

fn parse_err(line: usize, message: impl Into<String>) -> FixtureError {
    FixtureError::Parse { line, message: message.into() }
}

/// The raw contents of a table-LM fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct TableLmFixture {
    pub vocabulary: Vec<String>,
    pub order: usize,
    pub smoothing: f64,
    /// Context symbols (possibly starting with `<s>`) to a probability vector
    /// over the vocabulary. Kept in file order.
    pub rows: Vec<(Vec<String>, Vec<f64>)>,
}

impl TableLmFixture {
    pub fn from_file(path: &Path) -> Result<Self, FixtureError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| FixtureError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, FixtureError> {
        let mut vocabulary: Option<Vec<String>> = None;
        let mut order: Option<usize> = None;
        let mut smoothing = 0.0;
        let mut rows = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let fields: Vec<&str> = raw.split_whitespace().collect();
            let Some(&head) = fields.first() else { continue };
            if head == "#" || (head.starts_with('#') && !head.starts_with("##")) {
                continue;
            }
            match head {
                "vocab" if rows.is_empty() => {
                    if vocabulary.is_some() {
                        return Err(parse_err(line, "duplicate `vocab` header"));
                    }
                    vocabulary = Some(fields[1..].iter().map(|s| s.to_string()).collect());
                }
                "order" if rows.is_empty() => {
                    let [_, value] = fields[..] else {
                        return Err(parse_err(line, "expected `order <n>`"));
                    };
                    order = Some(value.parse().map_err(|_| parse_err(line, "order must be a non-negative integer"))?);
                }
                "smoothing" if rows.is_empty() => {
                    let [_, value] = fields[..] else {
                        return Err(parse_err(line, "expected `smoothing <lambda>`"));
                    };
                    smoothing = value
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite() && *v >= 0.0)
                        .ok_or_else(|| parse_err(line, "smoothing must be a finite non-negative number"))?;
                }
                _ => {
                    let vocab = vocabulary
                        .as_ref()
                        .ok_or_else(|| parse_err(line, "row before `vocab` header"))?;
                    let order = order.ok_or_else(|| parse_err(line, "row before `order` header"))?;
                    let v = vocab.len();
                    if fields.len() < v || fields.len() - v > order {
                        return Err(parse_err(
                            line,
                            format!("row needs 0..={order} context symbols and {v} probabilities"),
                        ));
                    }
                    let split = fields.len() - v;
                    let context: Vec<String> = fields[..split].iter().map(|s| s.to_string()).collect();
                    let probs = fields[split..]
                        .iter()
                        .map(|s| s.parse::<f64>().map_err(|_| parse_err(line, format!("bad probability `{s}`"))))
                        .collect::<Result<Vec<_>, _>>()?;
                    rows.push((context, probs));
                }
            }
        }
        let fixture = TableLmFixture {
            vocabulary: vocabulary.ok_or_else(|| FixtureError::Invalid("missing `vocab` header".into()))?,
            order: order.ok_or_else(|| FixtureError::Invalid("missing `order` header".into()))?,
            smoothing,
            rows,
        };
        fixture.validate()?;
        Ok(fixture)
    }

    pub fn validate(&self) -> Result<(), FixtureError> {
        let invalid = |m: String| Err(FixtureError::Invalid(m));
        let v = self.vocabulary.len();
        if v < 2 {
            return invalid(format!("vocabulary has {v} symbols, need at least 2"));
        }
        let mut seen = HashMap::new();
        for (i, s) in self.vocabulary.iter().enumerate() {
            // `#` and `#x` would read back as comment lines.
            let comment_like = s == "#" || (s.starts_with('#') && !s.starts_with("##"));
            if s.is_empty() || s.chars().any(char::is_whitespace) || s == BOS || comment_like {
                return invalid(format!("invalid vocabulary symbol `{s}`"));
            }
            if seen.insert(s.as_str(), i).is_some() {
                return invalid(format!("duplicate vocabulary symbol `{s}`"));
            }
        }
        if !seen.contains_key(UNK) {
            return invalid(format!("vocabulary must contain `{UNK}`"));
        }
        if !(self.smoothing.is_finite() && self.smoothing >= 0.0) {
            return invalid("smoothing must be finite and non-negative".into());
        }
        let mut contexts = HashMap::new();
        for (n, (context, probs)) in self.rows.iter().enumerate() {
            if context.len() > self.order {
                return invalid(format!("row {n}: context longer than order {}", self.order));
            }
            for (pos, sym) in context.iter().enumerate() {
                let ok = if sym == BOS { pos == 0 } else { seen.contains_key(sym.as_str()) };
                if !ok {
                    return invalid(format!("row {n}: unknown context symbol `{sym}`"));
                }
            }
            if probs.len() != v {
                return invalid(format!("row {n}: {} probabilities for {v} symbols", probs.len()));
            }
            if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return invalid(format!("row {n}: negative or non-finite probability"));
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return invalid(format!("row {n}: probabilities sum to {sum}"));
            }
            if contexts.insert(context.clone(), n).is_some() {
                return invalid(format!("row {n}: duplicate context {context:?}"));
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text(f)) == f`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "vocab {}", self.vocabulary.join(" ")).unwrap();
        writeln!(out, "order {}", self.order).unwrap();
        if self.smoothing != 0.0 {
            writeln!(out, "smoothing {:?}", self.smoothing).unwrap();
        }
        for (context, probs) in &self.rows {
            let mut fields: Vec<String> = context.clone();
            fields.extend(probs.iter().map(|p| format!("{p:?}")));
            writeln!(out, "{}", fields.join(" ")).unwrap();
        }
        out
    }

    /// A fixture whose only row is the uniform distribution.
    pub fn uniform(vocabulary: &[&str]) -> Self {
        let v = vocabulary.len();
        TableLmFixture {
            vocabulary: vocabulary.iter().map(|s| s.to_string()).collect(),
            order: 0,
            smoothing: 0.0,
            rows: vec![(Vec::new(), vec![1.0 / v as f64; v])],
        }
    }
}

/// Precomputed summary of one distribution.
#[derive(Debug, Clone)]
struct Dist {
    probs: Vec<f64>,
    logp: Vec<f64>,
    entropy: f64,
    mean_logp: f64,
}

impl Dist {
    fn new(probs: Vec<f64>) -> Self {
        // 1/V is rarely representable, so summing p*log p over a uniform row
        // misses log V by a few ulps. Equal entries can only mean 1/V each.
        if probs.windows(2).all(|w| w[0] == w[1]) {
            let log_v = (probs.len() as f64).ln();
            let logp = vec![-log_v; probs.len()];
            return Dist { probs, logp, entropy: log_v, mean_logp: -log_v };
        }
        let logp: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let entropy = -probs
            .iter()
            .zip(&logp)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, lp)| p * lp)
            .sum::<f64>();
        let mean_logp = logp.iter().sum::<f64>() / probs.len() as f64;
        Dist { probs, logp, entropy: entropy.max(0.0), mean_logp }
    }

    fn top_p_entropy(&self, top_p: f64) -> f64 {
        let mut sorted: Vec<f64> = self.probs.iter().copied().filter(|p| *p > 0.0).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let mut mass = 0.0;
        let mut keep = 0;
        for p in &sorted {
            mass += p;
            keep += 1;
            if mass >= top_p {
                break;
            }
        }
        let nucleus = &sorted[..keep];
        let total: f64 = nucleus.iter().sum();
        let h = -nucleus.iter().map(|p| p / total).map(|q| q * q.ln()).sum::<f64>();
        h.max(0.0)
    }
}

/// Token id of the start symbol in histories; never predicted.
type SymbolId = usize;

/// A scoring and sampling backend over a [`TableLmFixture`].
#[derive(Debug, Clone)]
pub struct TableLm {
    id: String,
    fingerprint: String,
    fixture: TableLmFixture,
    index: HashMap<String, SymbolId>,
    bos: SymbolId,
    unk: SymbolId,
    stop: Option<SymbolId>,
    /// Punctuation-only vocabulary symbols, longest first.
    punct_symbols: Vec<(String, SymbolId)>,
    rows: HashMap<Vec<SymbolId>, Dist>,
    uniform: Dist,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

impl TableLm {
    pub fn new(id: impl Into<String>, fixture: TableLmFixture) -> Result<Self, FixtureError> {
        fixture.validate()?;
        let v = fixture.vocabulary.len();
        let index: HashMap<String, SymbolId> =
            fixture.vocabulary.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let bos = v;
        let smooth = |probs: &[f64]| -> Vec<f64> {
            let l = fixture.smoothing;
            if l == 0.0 {
                probs.to_vec()
            } else {
                probs.iter().map(|p| (p + l) / (1.0 + v as f64 * l)).collect()
            }
        };
        let rows = fixture
            .rows
            .iter()
            .map(|(context, probs)| {
                let key = context.iter().map(|s| if s == BOS { bos } else { index[s] }).collect();
                (key, Dist::new(smooth(probs)))
            })
            .collect();
        let mut punct_symbols: Vec<(String, SymbolId)> = fixture
            .vocabulary
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.chars().any(is_word_char))
            .map(|(i, s)| (s.clone(), i))
            .collect();
        punct_symbols.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        let digest = Sha256::digest(fixture.to_text().as_bytes());
        let fingerprint = format!("table-lm:{};bos={BOS}", &hex::encode(digest)[..16]);
        Ok(TableLm {
            id: id.into(),
            fingerprint,
            unk: index[UNK],
            stop: index.get(STOP).copied(),
            index,
            bos,
            punct_symbols,
            rows,
            uniform: Dist::new(vec![1.0 / v as f64; v]),
            fixture,
        })
    }

    pub fn from_file(id: impl Into<String>, path: &Path) -> Result<Self, FixtureError> {
        Self::new(id, TableLmFixture::from_file(path)?)
    }

    pub fn fixture(&self) -> &TableLmFixture {
        &self.fixture
    }

    pub fn symbol(&self, id: SymbolId) -> &str {
        if id == self.bos {
            BOS
        } else {
            &self.fixture.vocabulary[id]
        }
    }

    /// Split `text` into `(token_text, symbol)` pairs.
    pub fn tokenize<'a>(&self, text: &'a str) -> Vec<(&'a str, SymbolId)> {
        let mut out: Vec<(&'a str, SymbolId)> = Vec::new();
        let mut token_start = 0;
        let mut pos = 0;
        let bytes = text.len();
        while pos < bytes {
            let rest = &text[pos..];
            let c = rest.chars().next().unwrap();
            if c.is_whitespace() {
                pos += c.len_utf8();
                continue;
            }
            let (len, sym) = if is_word_char(c) {
                let len = rest.find(|ch: char| !is_word_char(ch)).unwrap_or(rest.len());
                (len, self.index.get(&rest[..len]).copied().unwrap_or(self.unk))
            } else if let Some((s, id)) = self.punct_symbols.iter().find(|(s, _)| rest.starts_with(s.as_str())) {
                (s.len(), *id)
            } else {
                let len = c.len_utf8();
                (len, self.index.get(&rest[..len]).copied().unwrap_or(self.unk))
            };
            pos += len;
            out.push((&text[token_start..pos], sym));
            token_start = pos;
        }
        if token_start < bytes {
            if let Some(last) = out.last_mut() {
                let start = token_start - last.0.len();
                last.0 = &text[start..];
            }
        }
        out
    }

    fn history(&self, context: &str) -> Vec<SymbolId> {
        let mut h = vec![self.bos];
        h.extend(self.tokenize(context).into_iter().map(|(_, s)| s));
        h
    }

    fn dist(&self, history: &[SymbolId]) -> &Dist {
        let max = self.fixture.order.min(history.len());
        (0..=max)
            .rev()
            .find_map(|n| self.rows.get(&history[history.len() - n..]))
            .unwrap_or(&self.uniform)
    }
}

impl ScoringBackend for TableLm {
    fn id(&self) -> &str {
        &self.id
    }

    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn vocab_size(&self) -> usize {
        self.fixture.vocabulary.len()
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        request.validate()?;
        let tokens = self.tokenize(&request.continuation);
        if tokens.is_empty() {
            return Err(BackendError::EmptyContinuation);
        }
        let mut history = self.history(&request.context);
        let scores = tokens
            .into_iter()
            .map(|(text, sym)| {
                let d = self.dist(&history);
                let entropy = match request.entropy_top_p {
                    Some(p) if p < 1.0 => d.top_p_entropy(p),
                    _ => d.entropy,
                };
                history.push(sym);
                TokenScore {
                    token_text: text.to_owned(),
                    realized_logprob: d.logp[sym],
                    entropy,
                    mean_vocab_logprob: d.mean_logp,
                }
            })
            .collect();
        Ok(ScoreResponse::from_tokens(scores, self.vocab_size()))
    }

    fn sample(&self, context: &str, params: &SamplingParams, seed: u64) -> Result<String, BackendError> {
        if let Temperature::Scaled(t) = params.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(BackendError::InvalidRequest(format!("temperature {t} must be > 0")));
            }
        }
        let mut rng = sampling_rng(seed);
        let mut history = self.history(context);
        let mut out = String::new();
        let v = self.vocab_size();
        let mut weights = vec![0.0; v];
        for _ in 0..params.max_tokens {
            let d = self.dist(&history);
            let choice = match params.temperature {
                Temperature::Greedy => (0..v)
                    .filter(|&i| i != self.unk)
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if d.probs[b] >= d.probs[i] => Some(b),
                        _ => Some(i),
                    }),
                Temperature::Scaled(t) => {
                    let max = (0..v)
                        .filter(|&i| i != self.unk && d.probs[i] > 0.0)
                        .map(|i| d.logp[i])
                        .fold(f64::NEG_INFINITY, f64::max);
                    for (i, w) in weights.iter_mut().enumerate() {
                        *w = if i == self.unk || d.probs[i] <= 0.0 {
                            0.0
                        } else {
                            ((d.logp[i] - max) / t).exp()
                        };
                    }
                    draw(&weights, &mut rng)
                }
            };
            let Some(sym) = choice else { break };
            if Some(sym) == self.stop {
                break;
            }
            let text = self.symbol(sym);
            let attaches = text.chars().all(|c| matches!(c, '.' | ',' | ';' | ':' | '!' | '?' | ')' | ']'));
            if !out.is_empty() && !attaches {
                out.push(' ');
            }
            out.push_str(text);
            history.push(sym);
        }
        Ok(out)
    }
}

/// ChaCha8 keyed by SHA-256 of a domain tag and the seed.
fn sampling_rng(seed: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"ccb-sample");
    hasher.update(seed.to_le_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&hasher.finalize());
    ChaCha8Rng::from_seed(key)
}

/// Inverse-CDF draw over unnormalised weights with a 53-bit uniform.
fn draw(weights: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return None;
    }
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64) * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, w) in weights.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        acc += w;
        last = Some(i);
        if u < acc {
            return Some(i);
        }
    }
    last
}
