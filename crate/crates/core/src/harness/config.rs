//! Experiment configuration.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    BackendRegistry, CachedBackend, RemoteBackend, RemoteOptions, ScoreCache, ScoringBackend, TableLm, CACHE_DIR_ENV,
};
use crate::disruptions::{DisruptionSpec, Pipeline};
use crate::metrics::{Aggregation, MetricKind, Mode, SignConvention};
use crate::selection::GradingSource;
use crate::trace::{load_benchmark, BenchmarkFormat, BenchmarkItem};

use super::HarnessError;

pub const DEFAULT_GENERATION_PROMPT: &str = "{question}\nLet's think step by step.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    TableLm {
        id: String,
        path: PathBuf,
    },
    Remote {
        id: String,
        url: String,
        /// Environment variable holding a bearer token.
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default)]
        max_retries: Option<u32>,
        #[serde(default)]
        timeout_secs: Option<u64>,
    },
}

impl BackendConfig {
    pub fn id(&self) -> &str {
        match self {
            BackendConfig::TableLm { id, .. } | BackendConfig::Remote { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub name: String,
    pub path: PathBuf,
    #[serde(default = "canonical")]
    pub format: String,
}

fn canonical() -> String {
    "canonical".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub backend: String,
    /// Question file; candidates in it are ignored.
    pub questions: PathBuf,
    #[serde(default = "questions_format")]
    pub format: String,
    /// Where the canonical benchmark with candidates is written.
    pub output: PathBuf,
    pub n: usize,
    pub temperature: f64,
    /// Take the most probable symbol instead of sampling.
    #[serde(default)]
    pub greedy: bool,
    pub max_tokens: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_generation_prompt")]
    pub prompt_template: String,
}

fn questions_format() -> String {
    "questions".into()
}

fn default_generation_prompt() -> String {
    DEFAULT_GENERATION_PROMPT.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisruptionConfig {
    #[serde(default)]
    pub steps: Vec<DisruptionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    #[serde(default = "default_contrastive_kinds")]
    pub kinds: Vec<MetricKind>,
    #[serde(default = "default_masked_mode")]
    pub masked_mode: Mode,
    /// Weight used by `evaluate`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Grid used by `sweep-alpha`.
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
}

fn default_contrastive_kinds() -> Vec<MetricKind> {
    vec![MetricKind::SelfCertainty]
}

fn default_masked_mode() -> Mode {
    Mode::QueryMasked
}

fn default_alpha() -> f64 {
    0.5
}

/// `0.0, 0.1, ..., 1.0`.
pub fn default_alphas() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn default_metrics() -> Vec<MetricKind> {
    MetricKind::ALL.to_vec()
}

fn default_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

fn default_disruptions() -> Vec<DisruptionConfig> {
    vec![DisruptionConfig { steps: Vec::new() }]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Items evaluated in parallel.
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub sign: SignConvention,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub entropy_top_p: Option<f64>,
    #[serde(default)]
    pub grading: GradingSource,
    /// Scoring context with `{question}` and `{options}`; absent means the
    /// raw question.
    #[serde(default)]
    pub context_template: Option<String>,
    /// Label of the model that produced the candidates. Defaults to the
    /// generation backend, else `pre-generated`.
    #[serde(default)]
    pub generator: Option<String>,
    pub backends: Vec<BackendConfig>,
    pub benchmarks: Vec<BenchmarkConfig>,
    #[serde(default)]
    pub generation: Option<GenerationConfig>,
    pub evaluators: Vec<String>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricKind>,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default = "default_disruptions")]
    pub disruptions: Vec<DisruptionConfig>,
    #[serde(default)]
    pub contrastive: Option<ContrastiveConfig>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Replace `${NAME}` with the environment variable `NAME`; `$$` is a literal
/// `$`.
pub fn interpolate_env(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, HarnessError> {
    let re = Regex::new(r"\$\$|\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid pattern");
    let mut missing = None;
    let out = re.replace_all(text, |c: &Captures<'_>| match c.get(1) {
        None => "$".to_owned(),
        Some(name) => lookup(name.as_str()).unwrap_or_else(|| {
            missing.get_or_insert_with(|| name.as_str().to_owned());
            String::new()
        }),
    });
    match missing {
        Some(name) => Err(HarnessError::Config(format!("environment variable `{name}` is not set"))),
        None => Ok(out.into_owned()),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, HarnessError> {
        let text = interpolate_env(text, |k| std::env::var(k).ok())?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.base_dir = base_dir.into();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io { path: path.display().to_string(), source: e })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn generator_label(&self) -> String {
        self.generator
            .clone()
            .or_else(|| self.generation.as_ref().map(|g| g.backend.clone()))
            .unwrap_or_else(|| "pre-generated".into())
    }

    /// Checks that need no I/O.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        let mut ids = std::collections::BTreeSet::new();
        for b in &self.backends {
            if !ids.insert(b.id()) {
                return err(format!("backend `{}` declared twice", b.id()));
            }
        }
        let known = |id: &str| ids.contains(id);
        if self.evaluators.is_empty() {
            return err("no evaluators".into());
        }
        for e in &self.evaluators {
            if !known(e) {
                return err(format!("evaluator `{e}` is not a declared backend"));
            }
        }
        if self.benchmarks.is_empty() {
            return err("no benchmarks".into());
        }
        for b in &self.benchmarks {
            b.format.parse::<BenchmarkFormat>().map_err(HarnessError::Config)?;
        }
        if self.jobs == Some(0) {
            return err("jobs must be at least 1".into());
        }
        if let Some(p) = self.entropy_top_p {
            if !(p > 0.0 && p <= 1.0) {
                return err(format!("entropy_top_p {p} outside (0, 1]"));
            }
        }
        if let Some(g) = &self.generation {
            if !known(&g.backend) {
                return err(format!("generation backend `{}` is not declared", g.backend));
            }
            if g.n == 0 {
                return err("generation.n must be at least 1".into());
            }
            if !g.greedy && !(g.temperature > 0.0 && g.temperature.is_finite()) {
                return err(format!("generation.temperature {} must be positive", g.temperature));
            }
            g.format.parse::<BenchmarkFormat>().map_err(HarnessError::Config)?;
        }
        for d in &self.disruptions {
            Pipeline::new(d.steps.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
            for s in &d.steps {
                if let DisruptionSpec::EvaluatorSwap { evaluator } = s {
                    if !known(evaluator) {
                        return err(format!("evaluator_swap target `{evaluator}` is not declared"));
                    }
                }
            }
        }
        if let Some(c) = &self.contrastive {
            if c.masked_mode == Mode::Full {
                return err("contrastive.masked_mode must be step_masked or query_masked".into());
            }
            for a in c.alphas.iter().chain([&c.alpha]) {
                if !(0.0..=1.0).contains(a) {
                    return err(format!("alpha {a} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// Build every declared backend, wrapped in the score cache when one is
    /// configured here or through the environment.
    pub fn build_registry(&self) -> Result<BackendRegistry, HarnessError> {
        let cache = self.open_cache()?.map(Arc::new);
        let mut registry = BackendRegistry::new();
        for b in self.build_backends()? {
            let backend: Arc<dyn ScoringBackend> = match &cache {
                Some(c) => Arc::new(CachedBackend::new(b, c.clone())),
                None => b,
            };
            registry.register(backend);
        }
        Ok(registry)
    }

    /// The declared backends without any cache.
    pub fn build_backends(&self) -> Result<Vec<Arc<dyn ScoringBackend>>, HarnessError> {
        self.backends
            .iter()
            .map(|b| -> Result<Arc<dyn ScoringBackend>, HarnessError> {
                Ok(match b {
                    BackendConfig::TableLm { id, path } => Arc::new(
                        TableLm::from_file(id.clone(), &self.resolve(path))
                            .map_err(|e| HarnessError::Config(format!("backend `{id}`: {e}")))?,
                    ),
                    BackendConfig::Remote { id, url, api_key_env, max_retries, timeout_secs } => {
                        let mut opts = RemoteOptions::default();
                        if let Some(r) = max_retries {
                            opts.max_retries = *r;
                        }
                        if let Some(t) = timeout_secs {
                            opts.timeout = Duration::from_secs(*t);
                        }
                        opts.api_key = api_key_env.as_deref().and_then(|k| std::env::var(k).ok());
                        Arc::new(RemoteBackend::connect(id.clone(), url.clone(), opts)?)
                    }
                })
            })
            .collect()
    }

    pub fn cache_dir(&self) -> Option<PathBuf> {
        match &self.cache_dir {
            Some(d) => Some(self.resolve(d)),
            None => std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from),
        }
    }

    pub fn open_cache(&self) -> Result<Option<ScoreCache>, HarnessError> {
        match self.cache_dir() {
            Some(dir) => ScoreCache::open(&dir)
                .map(Some)
                .map_err(|e| HarnessError::Io { path: dir.display().to_string(), source: e }),
            None => Ok(None),
        }
    }

    pub fn load_benchmarks(&self) -> Result<Vec<(String, Vec<BenchmarkItem>)>, HarnessError> {
        self.benchmarks
            .iter()
            .map(|b| {
                let format = b.format.parse().map_err(HarnessError::Config)?;
                let items = load_benchmark(&self.resolve(&b.path), format)?;
                if items.iter().any(|i| i.candidates.is_empty()) {
                    return Err(HarnessError::Config(format!("benchmark `{}` has items without candidates", b.name)));
                }
                Ok((b.name.clone(), items))
            })
            .collect()
    }

    /// Hash of everything that determines the numbers: the config without
    /// run-local settings, the backend fingerprints and the benchmark bytes.
    pub fn fingerprint(&self, backend_fingerprints: &[(String, String)]) -> Result<String, HarnessError> {
        let stripped = ExperimentConfig { output_dir: None, cache_dir: None, jobs: None, ..self.clone() };
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&stripped).expect("config serializes").as_bytes());
        let mut fps = backend_fingerprints.to_vec();
        fps.sort();
        for (id, fp) in fps {
            h.update(format!("\n{id}={fp}").as_bytes());
        }
        for b in &self.benchmarks {
            let path = self.resolve(&b.path);
            let bytes = std::fs::read(&path)
                .map_err(|e| HarnessError::Io { path: path.display().to_string(), source: e })?;
            h.update(format!("\n{}:", b.name).as_bytes());
            h.update(Sha256::digest(&bytes));
        }
        Ok(hex::encode(&h.finalize()[..8]))
    }
}
