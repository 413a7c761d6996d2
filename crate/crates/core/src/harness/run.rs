//! Cell planning and execution.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::backend::{
    BackendRegistry, CacheStats, SamplingParams, ScoreCache, ScoringBackend, Temperature, VerifyReport,
};
use crate::disruptions::{DisruptionSpec, Pipeline, TraceContext};
use crate::metrics::{self, MetricSpec};
use crate::selection::{evaluate, CellId, EvaluateOptions};
use crate::trace::{load_benchmark, write_benchmark, BenchmarkItem, CandidateTrace};

use super::config::ExperimentConfig;
use super::report::{emit_report, write_rows, ReportRow};
use super::HarnessError;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the config's output directory.
    pub out_dir: Option<PathBuf>,
    /// Overrides the config's `jobs`.
    pub jobs: Option<usize>,
    /// Restrict evaluation to this evaluator.
    pub evaluator: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedCell {
    pub cell: CellId,
    pub disruption_label: String,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub rows: Vec<ReportRow>,
    /// Cells that could not run, with the reason.
    pub cell_errors: Vec<String>,
    pub fingerprint: String,
    pub files: Vec<PathBuf>,
}

fn evaluators(config: &ExperimentConfig, only: Option<&str>) -> Result<Vec<String>, HarnessError> {
    match only {
        Some(id) if config.backends.iter().any(|b| b.id() == id) => Ok(vec![id.to_owned()]),
        Some(id) => Err(HarnessError::Config(format!("backend `{id}` is not declared"))),
        None => Ok(config.evaluators.clone()),
    }
}

fn base_spec(config: &ExperimentConfig, kind: metrics::MetricKind, mode: metrics::Mode, evaluator: &str) -> MetricSpec {
    MetricSpec {
        sign: config.sign,
        aggregation: config.aggregation,
        entropy_top_p: config.entropy_top_p,
        ..MetricSpec::new(kind, mode, evaluator)
    }
}

fn has_mask(steps: &[DisruptionSpec]) -> bool {
    steps.iter().any(|s| matches!(s, DisruptionSpec::AttentionMask | DisruptionSpec::QueryMask))
}

/// Every cell of the cross product: benchmark x evaluator x disruption x
/// (metric x mode, then the contrastive metrics). Contrastive metrics are not
/// combined with mask disruptions.
pub fn plan_cells(config: &ExperimentConfig, only_evaluator: Option<&str>) -> Result<Vec<PlannedCell>, HarnessError> {
    let mut cells = Vec::new();
    let generator = config.generator_label();
    for bench in &config.benchmarks {
        for evaluator in evaluators(config, only_evaluator)? {
            for d in &config.disruptions {
                let label = Pipeline::new(d.steps.clone()).map_err(|e| HarnessError::Config(e.to_string()))?.label();
                let mut push = |metric: MetricSpec| {
                    cells.push(PlannedCell {
                        cell: CellId {
                            benchmark: bench.name.clone(),
                            generator: generator.clone(),
                            metric,
                            disruption: d.steps.clone(),
                        },
                        disruption_label: label.clone(),
                    })
                };
                for &kind in &config.metrics {
                    for &mode in &config.modes {
                        push(base_spec(config, kind, mode, &evaluator));
                    }
                }
                if let Some(c) = config.contrastive.as_ref().filter(|_| !has_mask(&d.steps)) {
                    for &kind in &c.kinds {
                        push(base_spec(config, kind, c.masked_mode, &evaluator).contrastive(c.alpha));
                    }
                }
            }
        }
    }
    Ok(cells)
}

fn out_dir(config: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    opts.out_dir
        .clone()
        .or_else(|| config.output_dir.as_ref().map(|d| config.resolve(d)))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, HarnessError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| HarnessError::Config(format!("thread pool: {e}")))
}

/// Run `f` on a pool of `jobs` threads (default: one per core).
pub fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    Ok(pool(jobs)?.install(f))
}

fn backend_fingerprints(registry: &BackendRegistry) -> Vec<(String, String)> {
    registry.ids().map(str::to_owned).zip(registry.fingerprints().map(str::to_owned)).collect()
}

fn run_cells(
    config: &ExperimentConfig,
    cells: Vec<PlannedCell>,
    opts: &RunOptions,
    stem: &str,
) -> Result<RunOutcome, HarnessError> {
    let registry = config.build_registry()?;
    let benchmarks = config.load_benchmarks()?;
    let fingerprint = config.fingerprint(&backend_fingerprints(&registry))?;
    let dir = out_dir(config, opts);
    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let rows_path = dir.join(format!("{stem}_rows.jsonl"));
    let mut rows_file = fs::File::create(&rows_path).map_err(|e| HarnessError::io(&rows_path, e))?;
    let options = EvaluateOptions { context_template: config.context_template.clone(), grading: config.grading };
    let pool = pool(opts.jobs.or(config.jobs))?;

    let mut rows = Vec::new();
    let mut cell_errors = Vec::new();
    let total = cells.len();
    for (n, planned) in cells.into_iter().enumerate() {
        let items = &benchmarks
            .iter()
            .find(|(name, _)| *name == planned.cell.benchmark)
            .expect("cells are planned from the configured benchmarks")
            .1;
        let metric_label = planned.cell.metric.metric_label();
        match pool.install(|| evaluate(items, planned.cell.clone(), &registry, &options)) {
            Ok(eval) => {
                let row = ReportRow::from_report(&eval.report, &config.generator_label(), &planned.disruption_label, &fingerprint);
                tracing::info!(
                    cell = n + 1,
                    of = total,
                    metric = %metric_label,
                    mode = %row.mode,
                    disruption = %row.disruption,
                    accuracy = row.accuracy,
                    "cell done"
                );
                write_rows(&mut rows_file, std::slice::from_ref(&row)).map_err(|e| HarnessError::io(&rows_path, e))?;
                rows.push(row);
            }
            Err(e) => {
                let msg = format!(
                    "{} / {} / {} / {}: {e}",
                    planned.cell.benchmark,
                    planned.cell.metric.evaluator,
                    metric_label,
                    planned.disruption_label
                );
                tracing::error!("{msg}");
                cell_errors.push(msg);
            }
        }
    }
    let files = if rows.is_empty() { Vec::new() } else { emit_report(&rows, &dir, stem)? };
    Ok(RunOutcome { rows, cell_errors, fingerprint, files })
}

/// Run every planned cell, appending each finished row to
/// `report_rows.jsonl` and writing the report files at the end. Re-running
/// with a score cache recomputes only what the cache lacks.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome, HarnessError> {
    let cells = plan_cells(config, opts.evaluator.as_deref())?;
    run_cells(config, cells, opts, "report")
}

/// One row per alpha per (benchmark, evaluator, disruption, contrastive kind)
/// cell, written as the `sweep` report.
pub fn sweep_alpha(config: &ExperimentConfig, alphas: Option<&[f64]>, opts: &RunOptions) -> Result<RunOutcome, HarnessError> {
    let c = config
        .contrastive
        .as_ref()
        .ok_or_else(|| HarnessError::Config("sweep-alpha needs a [contrastive] section".into()))?;
    let alphas = alphas.map(<[f64]>::to_vec).unwrap_or_else(|| c.alphas.clone());
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(HarnessError::Config(format!("alpha {a} outside [0, 1]")));
    }
    let generator = config.generator_label();
    let mut cells = Vec::new();
    for bench in &config.benchmarks {
        for evaluator in evaluators(config, opts.evaluator.as_deref())? {
            for d in config.disruptions.iter().filter(|d| !has_mask(&d.steps)) {
                let label = Pipeline::new(d.steps.clone()).map_err(|e| HarnessError::Config(e.to_string()))?.label();
                for &kind in &c.kinds {
                    for &alpha in &alphas {
                        cells.push(PlannedCell {
                            cell: CellId {
                                benchmark: bench.name.clone(),
                                generator: generator.clone(),
                                metric: base_spec(config, kind, c.masked_mode, &evaluator).contrastive(alpha),
                                disruption: d.steps.clone(),
                            },
                            disruption_label: label.clone(),
                        });
                    }
                }
            }
        }
    }
    run_cells(config, cells, opts, "sweep")
}

/// Metric value of one candidate in a `score` run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateRecord {
    pub item_id: String,
    pub candidate: usize,
    pub value: Option<f64>,
    pub token_count: Option<usize>,
    pub step_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masked_token_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Per-candidate metric values for one cell, in item and candidate order.
pub fn score_cell(
    config: &ExperimentConfig,
    registry: &BackendRegistry,
    items: &[BenchmarkItem],
    cell: &CellId,
) -> Result<Vec<CandidateRecord>, HarnessError> {
    let pipeline = Pipeline::new(cell.disruption.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
    let metric = pipeline.apply_metric(&cell.metric).map_err(|e| HarnessError::Config(e.to_string()))?;
    metric.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    let backend = registry.get(&metric.evaluator)?.clone();
    let per_item: Vec<Vec<CandidateRecord>> = items
        .par_iter()
        .map(|item| {
            let query = item.query(config.context_template.as_deref());
            item.candidates
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let ctx = TraceContext {
                        item_id: &item.item_id,
                        candidate_index: i,
                        task_type: item.task_type,
                        tokenizer: Some(backend.as_ref()),
                    };
                    let outcome = pipeline
                        .apply_trace(c, &ctx)
                        .map_err(|e| e.to_string())
                        .and_then(|d| {
                            let steps = d.trace.step_count();
                            metrics::compute(&d.trace, &query, &metric, backend.as_ref())
                                .map(|v| (v, steps))
                                .map_err(|e| e.to_string())
                        });
                    let base = CandidateRecord {
                        item_id: item.item_id.clone(),
                        candidate: i,
                        value: None,
                        token_count: None,
                        step_count: c.step_count(),
                        masked_token_count: None,
                        diagnostic: None,
                    };
                    match outcome {
                        Ok((Some(v), _)) => CandidateRecord {
                            value: Some(v.value),
                            token_count: Some(v.token_count),
                            step_count: v.step_count,
                            masked_token_count: v.masked_token_count,
                            ..base
                        },
                        Ok((None, steps)) => CandidateRecord {
                            step_count: steps,
                            diagnostic: Some("no scorable tokens".into()),
                            ..base
                        },
                        Err(e) => CandidateRecord { diagnostic: Some(e), ..base },
                    }
                })
                .collect()
        })
        .collect();
    Ok(per_item.into_iter().flatten().collect())
}

/// Seed of candidate `index` of `item_id`: the first 8 bytes (little-endian)
/// of `sha256("ccb-generate" || seed_le64 || len_le64(item_id) || item_id || index_le64)`.
fn candidate_seed(seed: u64, item_id: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"ccb-generate");
    h.update(seed.to_le_bytes());
    h.update((item_id.len() as u64).to_le_bytes());
    h.update(item_id.as_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("32-byte digest"))
}

/// Sample `n` candidates per question with the generation backend and write
/// them as a canonical benchmark. `seed` overrides the configured seed.
pub fn generate_candidates(config: &ExperimentConfig, seed: Option<u64>) -> Result<(PathBuf, Vec<BenchmarkItem>), HarnessError> {
    let g = config
        .generation
        .as_ref()
        .ok_or_else(|| HarnessError::Config("generate needs a [generation] section".into()))?;
    let backend: std::sync::Arc<dyn ScoringBackend> = config
        .build_backends()?
        .into_iter()
        .find(|b| b.id() == g.backend)
        .ok_or_else(|| HarnessError::Config(format!("backend `{}` is not declared", g.backend)))?;
    let format = g.format.parse().map_err(HarnessError::Config)?;
    let questions = load_benchmark(&config.resolve(&g.questions), format)?;
    let seed = seed.unwrap_or(g.seed);
    let params = SamplingParams {
        temperature: if g.greedy { Temperature::Greedy } else { Temperature::Scaled(g.temperature) },
        max_tokens: g.max_tokens,
    };
    let items: Vec<BenchmarkItem> = questions
        .par_iter()
        .map(|q| -> Result<BenchmarkItem, HarnessError> {
            let prompt = q.query(Some(&g.prompt_template));
            let candidates = (0..g.n)
                .map(|i| {
                    let text = backend.sample(&prompt, &params, candidate_seed(seed, &q.item_id, i))?;
                    Ok(CandidateTrace::new(text, q.task_type))
                })
                .collect::<Result<Vec<_>, HarnessError>>()?;
            Ok(BenchmarkItem { candidates, ..q.clone() })
        })
        .collect::<Result<_, _>>()?;
    let out = config.resolve(&g.output);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    write_benchmark(&out, &items).map_err(|e| HarnessError::io(&out, e))?;
    Ok((out, items))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheCommand {
    Stats,
    Verify,
    Gc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheStatus {
    Stats(CacheStats),
    Verify(VerifyReport),
    Gc { removed: usize, remaining: usize },
}

/// `known` lists the fingerprints `gc` keeps.
pub fn cache_admin(cache: &ScoreCache, command: CacheCommand, known: &HashSet<String>) -> Result<CacheStatus, HarnessError> {
    let io = |e| HarnessError::io(cache.dir(), e);
    Ok(match command {
        CacheCommand::Stats => CacheStatus::Stats(cache.stats().map_err(io)?),
        CacheCommand::Verify => CacheStatus::Verify(cache.verify().map_err(io)?),
        CacheCommand::Gc => {
            let removed = cache.gc(known).map_err(io)?;
            CacheStatus::Gc { removed, remaining: cache.len() }
        }
    })
}

/// Path of the rows file a run with `stem` writes into `dir`.
pub fn rows_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}_rows.jsonl"))
}
