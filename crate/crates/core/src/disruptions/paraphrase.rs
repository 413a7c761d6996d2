//! Per-step paraphrasing through a rewriter.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::trace::{segment_trace, CandidateTrace};

/// Placeholder replaced by the step text in a prompt template.
pub const SENTENCE_PLACEHOLDER: &str = "{sentence}";

/// Environment variable holding the rewriter API key.
pub const REWRITER_KEY_ENV: &str = "CCB_REWRITER_KEY";

pub const DEFAULT_PROMPT_TEMPLATE: &str = "Paraphrase the following reasoning sentence.

Rules:
1. Preserve all mathematical meaning and symbols.
2. Keep logical relationships intact.
3. Make the wording formal and clear.
4. Change phrasing, syntax, and structure as much as possible.
5. Output only one rewritten sentence.

Sentence: {sentence}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewriterConfig {
    /// `mock:identity`, `mock:synonyms` or the URL of a chat-completions
    /// endpoint.
    pub endpoint: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default = "default_template")]
    pub prompt_template: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Word replacements for `mock:synonyms`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub synonyms: BTreeMap<String, String>,
    /// Concurrent rewriter calls per trace.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

fn default_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_owned()
}

fn default_retries() -> u32 {
    2
}

fn default_concurrency() -> usize {
    4
}

impl RewriterConfig {
    pub fn identity() -> Self {
        Self {
            endpoint: "mock:identity".into(),
            model_name: String::new(),
            prompt_template: default_template(),
            temperature: 0.0,
            max_retries: default_retries(),
            synonyms: BTreeMap::new(),
            concurrency: default_concurrency(),
        }
    }

    pub fn synonyms(table: impl IntoIterator<Item = (String, String)>) -> Self {
        Self { endpoint: "mock:synonyms".into(), synonyms: table.into_iter().collect(), ..Self::identity() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.prompt_template.contains(SENTENCE_PLACEHOLDER) {
            return Err(format!("prompt_template lacks the {SENTENCE_PLACEHOLDER} placeholder"));
        }
        if self.concurrency == 0 {
            return Err("rewriter concurrency must be at least 1".into());
        }
        match self.endpoint.as_str() {
            "mock:identity" | "mock:synonyms" => Ok(()),
            e if e.starts_with("http://") || e.starts_with("https://") => Ok(()),
            e => Err(format!("unknown rewriter endpoint `{e}`")),
        }
    }

    pub fn render(&self, sentence: &str) -> String {
        self.prompt_template.replace(SENTENCE_PLACEHOLDER, sentence)
    }

    /// Build the rewriter this config names.
    pub fn build(&self) -> Result<Arc<dyn Rewriter>, String> {
        self.validate()?;
        Ok(match self.endpoint.as_str() {
            "mock:identity" => Arc::new(IdentityRewriter),
            "mock:synonyms" => Arc::new(SynonymRewriter::new(self.synonyms.clone())),
            _ => Arc::new(ChatRewriter::new(self)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct RewriteError(pub String);

/// Rewrites one sentence. `prompt` is the rendered template, `sentence` the
/// bare step text it embeds.
pub trait Rewriter: Send + Sync {
    fn rewrite(&self, prompt: &str, sentence: &str) -> Result<String, RewriteError>;

    /// Local rewriters are called sequentially.
    fn is_local(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRewriter;

impl Rewriter for IdentityRewriter {
    fn rewrite(&self, _prompt: &str, sentence: &str) -> Result<String, RewriteError> {
        Ok(sentence.to_owned())
    }

    fn is_local(&self) -> bool {
        true
    }
}

/// Whole-word replacement from a fixed table.
#[derive(Debug, Clone)]
pub struct SynonymRewriter {
    table: BTreeMap<String, String>,
}

impl SynonymRewriter {
    pub fn new(table: BTreeMap<String, String>) -> Self {
        Self { table }
    }

    pub fn apply(&self, sentence: &str) -> String {
        let mut out = String::with_capacity(sentence.len());
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut String| {
            match self.table.get(word.as_str()) {
                Some(r) => out.push_str(r),
                None => out.push_str(word),
            }
            word.clear();
        };
        for c in sentence.chars() {
            if c.is_alphanumeric() || c == '_' {
                word.push(c);
            } else {
                flush(&mut word, &mut out);
                out.push(c);
            }
        }
        flush(&mut word, &mut out);
        out
    }
}

impl Rewriter for SynonymRewriter {
    fn rewrite(&self, _prompt: &str, sentence: &str) -> Result<String, RewriteError> {
        Ok(self.apply(sentence))
    }

    fn is_local(&self) -> bool {
        true
    }
}

/// Chat-completions client: one user message holding the rendered prompt,
/// reply read from `choices[0].message.content`.
#[derive(Debug)]
pub struct ChatRewriter {
    endpoint: String,
    model: String,
    temperature: f64,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl ChatRewriter {
    pub fn new(config: &RewriterConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self {
            endpoint: config.endpoint.clone(),
            model: config.model_name.clone(),
            temperature: config.temperature,
            api_key: std::env::var(REWRITER_KEY_ENV).ok(),
            agent,
        }
    }
}

impl Rewriter for ChatRewriter {
    fn rewrite(&self, prompt: &str, _sentence: &str) -> Result<String, RewriteError> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.agent.post(&self.endpoint).header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body.to_string()).map_err(|e| RewriteError(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| RewriteError(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(RewriteError(format!("status {status}: {}", text.chars().take(200).collect::<String>())));
        }
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| RewriteError(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_owned)
            .ok_or_else(|| RewriteError("reply has no choices[0].message.content".into()))
    }
}

/// A paraphrased trace and what went wrong on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Paraphrased {
    pub trace: CandidateTrace,
    /// One entry per step that kept its original text.
    pub diagnostics: Vec<String>,
}

/// The reply as a single sentence, if it is one.
fn single_sentence(reply: &str) -> Option<&str> {
    let line = reply.trim();
    if line.is_empty() || line.contains('\n') {
        return None;
    }
    (segment_trace(line).len() == 1).then_some(line)
}

fn split_ws(text: &str) -> (&str, &str, &str) {
    let core = text.trim();
    let lead = &text[..text.len() - text.trim_start().len()];
    let trail = &text[lead.len() + core.len()..];
    (lead, core, trail)
}

fn paraphrase_step(
    text: &str,
    config: &RewriterConfig,
    rewriter: &dyn Rewriter,
) -> Result<String, String> {
    let (lead, core, trail) = split_ws(text);
    if core.is_empty() {
        return Ok(text.to_owned());
    }
    let prompt = config.render(core);
    let mut last = String::new();
    for _ in 0..=config.max_retries {
        match rewriter.rewrite(&prompt, core) {
            Ok(reply) => match single_sentence(&reply) {
                Some(s) => return Ok(format!("{lead}{s}{trail}")),
                None => last = format!("reply is not a single sentence: {:?}", reply.chars().take(120).collect::<String>()),
            },
            Err(e) => last = e.0,
        }
    }
    Err(last)
}

/// Rewrite every step on its own, keeping each step's surrounding
/// whitespace. Blank steps are not sent. A step whose rewrites all fail
/// keeps its text and gets a diagnostic. Step count and order never change.
pub fn paraphrase_steps(trace: &CandidateTrace, config: &RewriterConfig, rewriter: &dyn Rewriter) -> Paraphrased {
    let results: Vec<Result<String, String>> = if rewriter.is_local() || config.concurrency <= 1 {
        trace.steps.iter().map(|s| paraphrase_step(&s.text, config, rewriter)).collect()
    } else {
        let mut out = Vec::with_capacity(trace.steps.len());
        for chunk in trace.steps.chunks(config.concurrency) {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|s| scope.spawn(move || paraphrase_step(&s.text, config, rewriter)))
                    .collect();
                for h in handles {
                    out.push(h.join().unwrap_or_else(|_| Err("rewriter thread panicked".into())));
                }
            });
        }
        out
    };
    let mut diagnostics = Vec::new();
    let texts: Vec<String> = results
        .into_iter()
        .zip(&trace.steps)
        .map(|(r, step)| match r {
            Ok(t) => t,
            Err(e) => {
                diagnostics.push(format!("step {}: kept original ({e})", step.index));
                step.text.clone()
            }
        })
        .collect();
    Paraphrased { trace: CandidateTrace::from_step_texts(texts, trace.final_answer.clone()), diagnostics }
}
