use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use ccb_core::backend::ScoreCache;
use ccb_core::harness::{
    cache_admin, emit_report, generate_candidates, read_rows, rows_path, run_experiment, score_cell, sweep_alpha,
    with_pool, CacheCommand, ExperimentConfig, RunOptions, RunOutcome,
};
use ccb_core::metrics::{MetricKind, MetricSpec, Mode};
use ccb_core::selection::{pass_at_n, CellId};
use ccb_core::trace::{load_benchmark, write_benchmark, BenchmarkFormat};

#[derive(Parser)]
#[command(name = "ccb")]
#[command(about = "Score, disrupt and select chain-of-thought candidates")]
#[command(version)]
struct Cli {
    /// Experiment config (TOML)
    #[arg(long, global = true, env = "CCB_CONFIG")]
    config: Option<PathBuf>,

    /// Output directory (overrides the config)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Base seed for candidate generation
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Backend id: the evaluator for score/evaluate/sweep-alpha, the sampler
    /// for generate
    #[arg(long, global = true)]
    backend: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a benchmark file and convert it to the canonical format
    Ingest {
        input: PathBuf,
        /// canonical | questions | gsm8k | multiple_choice
        #[arg(long, default_value = "canonical")]
        format: String,
        /// Canonical output file; omitted means validate only
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sample candidates for the configured questions
    Generate,
    /// Per-candidate metric values for one cell
    Score(ScoreArgs),
    /// Run every configured cell and write the report
    Evaluate,
    /// Run the contrastive metric over a grid of alphas
    SweepAlpha {
        /// Comma-separated alphas; default is the config's grid
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    /// Re-render report files from a rows file
    Report {
        /// Rows file; default is `<out>/report_rows.jsonl`
        rows: Option<PathBuf>,
        #[arg(long, default_value = "report")]
        stem: String,
    },
    /// Score cache administration
    Cache {
        #[arg(value_enum)]
        action: CacheAction,
        /// Cache directory; default from the config or CCB_CACHE_DIR
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long, value_enum)]
    metric: KindArg,
    #[arg(long, value_enum, default_value = "full")]
    mode: ModeArg,
    /// Contrastive weight; `--mode` then names the masked variant
    #[arg(long)]
    alpha: Option<f64>,
    /// Index into the config's disruption list
    #[arg(long, default_value_t = 0)]
    disruption: usize,
    /// Benchmark name; default is the first one
    #[arg(long)]
    benchmark: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    #[value(alias = "self_certainty")]
    SelfCertainty,
    #[value(alias = "log_likelihood")]
    LogLikelihood,
    Entropy,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    #[value(alias = "step_masked")]
    StepMasked,
    #[value(alias = "query_masked")]
    QueryMasked,
}

#[derive(Clone, Copy, ValueEnum)]
enum CacheAction {
    Stats,
    Verify,
    Gc,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().context("--config is required for this command")?;
    let mut config = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let (Some(b), Some(g)) = (&cli.backend, config.generation.as_mut()) {
        if matches!(cli.command, Command::Generate) {
            g.backend = b.clone();
        }
    }
    Ok(config)
}

fn run_options(cli: &Cli) -> RunOptions {
    RunOptions { out_dir: cli.out.clone(), jobs: cli.jobs, evaluator: cli.backend.clone() }
}

fn finish_run(outcome: RunOutcome) -> Result<ExitCode> {
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    println!("{} rows, fingerprint {}", outcome.rows.len(), outcome.fingerprint);
    if outcome.cell_errors.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for e in &outcome.cell_errors {
            eprintln!("cell failed: {e}");
        }
        Ok(ExitCode::from(2))
    }
}

fn ingest(input: &Path, format: &str, output: Option<&Path>) -> Result<()> {
    let format: BenchmarkFormat = format.parse().map_err(anyhow::Error::msg)?;
    let items = load_benchmark(input, format)?;
    let candidates: usize = items.iter().map(|i| i.candidates.len()).sum();
    println!("{}: {} items, {candidates} candidates", input.display(), items.len());
    if candidates > 0 {
        println!("pass@N {}", pass_at_n(&items));
    }
    if let Some(out) = output {
        write_benchmark(out, &items).with_context(|| format!("writing {}", out.display()))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn score(cli: &Cli, args: &ScoreArgs) -> Result<()> {
    let config = load_config(cli)?;
    let registry = config.build_registry()?;
    let benchmarks = config.load_benchmarks()?;
    let (name, items) = match &args.benchmark {
        Some(b) => benchmarks.iter().find(|(n, _)| n == b).with_context(|| format!("no benchmark `{b}`"))?,
        None => &benchmarks[0],
    };
    let evaluator = cli.backend.clone().unwrap_or_else(|| config.evaluators[0].clone());
    let kind = match args.metric {
        KindArg::SelfCertainty => MetricKind::SelfCertainty,
        KindArg::LogLikelihood => MetricKind::LogLikelihood,
        KindArg::Entropy => MetricKind::Entropy,
    };
    let mode = match args.mode {
        ModeArg::Full => Mode::Full,
        ModeArg::StepMasked => Mode::StepMasked,
        ModeArg::QueryMasked => Mode::QueryMasked,
    };
    let mut metric = MetricSpec {
        sign: config.sign,
        aggregation: config.aggregation,
        entropy_top_p: config.entropy_top_p,
        ..MetricSpec::new(kind, mode, evaluator)
    };
    metric.alpha = args.alpha;
    let Some(disruption) = config.disruptions.get(args.disruption) else {
        bail!("disruption index {} out of range ({} configured)", args.disruption, config.disruptions.len());
    };
    let cell = CellId {
        benchmark: name.clone(),
        generator: config.generator_label(),
        metric,
        disruption: disruption.steps.clone(),
    };
    let records = with_pool(cli.jobs.or(config.jobs), || score_cell(&config, &registry, items, &cell))??;
    let mut out: Box<dyn Write> = match &cli.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("scores.jsonl");
            eprintln!("writing {}", path.display());
            Box::new(std::io::BufWriter::new(std::fs::File::create(path)?))
        }
        None => Box::new(std::io::stdout().lock()),
    };
    for r in records {
        writeln!(out, "{}", serde_json::to_string(&r)?)?;
    }
    out.flush()?;
    Ok(())
}

fn report(cli: &Cli, rows: Option<&Path>, stem: &str) -> Result<()> {
    let dir = match (&cli.out, &cli.config) {
        (Some(d), _) => d.clone(),
        (None, Some(_)) => {
            let config = load_config(cli)?;
            config.output_dir.as_ref().map(|d| config.resolve(d)).unwrap_or_else(|| PathBuf::from("out"))
        }
        (None, None) => PathBuf::from("out"),
    };
    let rows_file = rows.map(Path::to_path_buf).unwrap_or_else(|| rows_path(&dir, stem));
    let rows = read_rows(&rows_file)?;
    for f in emit_report(&rows, &dir, stem)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cache(cli: &Cli, action: CacheAction, dir: Option<&Path>) -> Result<()> {
    let config = cli.config.as_ref().map(|_| load_config(cli)).transpose()?;
    let dir = match (dir, &config) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(c)) => c.cache_dir().context("the config names no cache and CCB_CACHE_DIR is unset")?,
        (None, None) => std::env::var_os(ccb_core::backend::CACHE_DIR_ENV)
            .map(PathBuf::from)
            .context("pass --dir, --config or set CCB_CACHE_DIR")?,
    };
    let command = match action {
        CacheAction::Stats => CacheCommand::Stats,
        CacheAction::Verify => CacheCommand::Verify,
        CacheAction::Gc => CacheCommand::Gc,
    };
    let known: HashSet<String> = match (&config, command) {
        (Some(c), CacheCommand::Gc) => c.build_backends()?.iter().map(|b| b.fingerprint().to_owned()).collect(),
        (None, CacheCommand::Gc) => bail!("gc needs --config to know which backends are current"),
        _ => HashSet::new(),
    };
    let cache = ScoreCache::open(&dir).with_context(|| format!("opening cache {}", dir.display()))?;
    let status = cache_admin(&cache, command, &known)?;
    println!("{}", serde_json::to_string(&status)?);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Ingest { input, format, output } => ingest(input, format, output.as_deref())?,
        Command::Generate => {
            let config = load_config(&cli)?;
            let (path, items) = generate_candidates(&config, cli.seed)?;
            println!("wrote {} items to {}", items.len(), path.display());
        }
        Command::Score(args) => score(&cli, args)?,
        Command::Evaluate => {
            let config = load_config(&cli)?;
            return finish_run(run_experiment(&config, &run_options(&cli))?);
        }
        Command::SweepAlpha { alphas } => {
            let config = load_config(&cli)?;
            return finish_run(sweep_alpha(&config, alphas.as_deref(), &run_options(&cli))?);
        }
        Command::Report { rows, stem } => report(&cli, rows.as_deref(), stem)?,
        Command::Cache { action, dir } => cache(&cli, *action, dir.as_deref())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
