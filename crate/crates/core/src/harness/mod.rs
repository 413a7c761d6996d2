//! Experiment orchestration: configuration, candidate generation, cell
//! execution, alpha sweeps, reports and cache administration.

mod config;
mod report;
mod run;

pub use config::{
    default_alphas, interpolate_env, BackendConfig, BenchmarkConfig, ContrastiveConfig, DisruptionConfig,
    ExperimentConfig, GenerationConfig, DEFAULT_GENERATION_PROMPT,
};
pub use report::{emit_report, read_rows, render_csv, render_curves, render_text, write_rows, ReportRow};
pub use run::{
    cache_admin, generate_candidates, plan_cells, run_experiment, score_cell, sweep_alpha, CacheCommand,
    CacheStatus, CandidateRecord, PlannedCell, RunOptions, RunOutcome, rows_path, with_pool,
};

use crate::backend::BackendError;
use crate::trace::LoadError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{0}")]
    Cell(String),
}

impl HarnessError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.display().to_string(), source }
    }
}
