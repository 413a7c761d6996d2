mod common;

use std::fs;
use std::path::{Path, PathBuf};

use ccb_core::harness::{
    generate_candidates, plan_cells, read_rows, render_csv, rows_path, run_experiment, score_cell, sweep_alpha,
    ExperimentConfig, HarnessError, ReportRow, RunOptions,
};
use tempfile::TempDir;

use common::fixture;

/// A copy of the synthetic experiment with `head` inserted before and `tail`
/// appended after the config text.
fn synthetic(head: &str, tail: &str) -> (TempDir, ExperimentConfig) {
    let dir = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(fixture("synthetic")).unwrap() {
        let path = entry.unwrap().path();
        fs::copy(&path, dir.path().join(path.file_name().unwrap())).unwrap();
    }
    let base = fs::read_to_string(dir.path().join("synthetic.toml")).unwrap();
    let text = format!("{head}\n{base}\n{tail}\n");
    let path = dir.path().join("synthetic.toml");
    fs::write(&path, text).unwrap();
    let config = ExperimentConfig::load(&path).unwrap();
    (dir, config)
}

fn run(config: &ExperimentConfig, out: &Path, jobs: Option<usize>) -> Vec<ReportRow> {
    let opts = RunOptions { out_dir: Some(out.to_owned()), jobs, ..Default::default() };
    let outcome = run_experiment(config, &opts).unwrap();
    assert!(outcome.cell_errors.is_empty(), "{:?}", outcome.cell_errors);
    outcome.rows
}

fn golden_csv() -> String {
    fs::read_to_string(fixture("golden/synthetic_report.csv")).unwrap()
}

fn out(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

#[test]
fn generation_reproduces_the_committed_candidates() {
    let (dir, config) = synthetic("", "");
    fs::remove_file(dir.path().join("candidates.jsonl")).unwrap();
    let (path, items) = generate_candidates(&config, None).unwrap();
    assert_eq!(items.len(), 20);
    assert!(items.iter().all(|i| i.candidates.len() == 10));
    assert_eq!(fs::read(path).unwrap(), fs::read(fixture("synthetic/candidates.jsonl")).unwrap());

    let (_, other) = generate_candidates(&config, Some(2025)).unwrap();
    assert_ne!(other, items);
}

#[test]
fn thread_count_does_not_change_the_report() {
    let (dir, config) = synthetic("", "");
    run(&config, &out(&dir, "one"), Some(1));
    run(&config, &out(&dir, "four"), Some(4));
    let one = fs::read_to_string(out(&dir, "one/report.csv")).unwrap();
    assert_eq!(one, fs::read_to_string(out(&dir, "four/report.csv")).unwrap());
    assert_eq!(one, golden_csv());
}

#[test]
fn resumed_run_is_served_from_the_cache() {
    let (dir, partial) = synthetic("cache_dir = \"cache\"", "");
    // An interrupted run: only the undisrupted cells finished.
    let mut first = partial.clone();
    first.disruptions.truncate(1);
    run(&first, &out(&dir, "a"), None);
    let log = dir.path().join("cache/scores.log");
    let after_partial = fs::metadata(&log).unwrap().len();
    assert!(after_partial > 0);

    run(&partial, &out(&dir, "b"), None);
    let after_full = fs::metadata(&log).unwrap().len();
    assert!(after_full > after_partial);
    assert_eq!(fs::read_to_string(out(&dir, "b/report.csv")).unwrap(), golden_csv());

    // Nothing new to score the second time round.
    run(&partial, &out(&dir, "c"), None);
    assert_eq!(fs::metadata(&log).unwrap().len(), after_full);
    assert_eq!(fs::read_to_string(out(&dir, "c/report.csv")).unwrap(), golden_csv());
}

#[test]
fn report_rerenders_from_rows() {
    let (dir, config) = synthetic("", "");
    let rows = run(&config, &out(&dir, "r"), None);
    let reread = read_rows(&rows_path(&out(&dir, "r"), "report")).unwrap();
    assert_eq!(reread, rows);
    assert_eq!(render_csv(&reread), golden_csv());
    let text = fs::read_to_string(out(&dir, "r/report.txt")).unwrap();
    assert!(text.contains("mean over self_certainty, log_likelihood, entropy"));
    let curves = fs::read_to_string(out(&dir, "r/report_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 9);
}

#[test]
fn zero_alpha_sweep_matches_the_full_metric() {
    let (dir, config) = synthetic("", "[contrastive]\nalphas = [0.0, 0.5, 1.0]");
    let sweep = sweep_alpha(&config, None, &RunOptions { out_dir: Some(out(&dir, "s")), ..Default::default() }).unwrap();
    assert_eq!(sweep.rows.len(), 3 * 3);
    let full = run(&config, &out(&dir, "f"), None);
    for row in sweep.rows.iter().filter(|r| r.alpha == Some(0.0)) {
        let twin = full
            .iter()
            .find(|r| r.metric == "self_certainty" && r.mode == "full" && r.disruption == row.disruption)
            .unwrap();
        assert_eq!((row.n_correct, row.accuracy), (twin.n_correct, twin.accuracy), "{}", row.disruption);
    }
    // The evaluate run carries the contrastive cell at the configured alpha.
    assert!(full.iter().any(|r| r.metric == "self_certainty-contrastive" && r.alpha == Some(0.5)));
    assert!(out(&dir, "s/sweep.csv").exists());

    let bad = sweep_alpha(&config, Some(&[1.5]), &RunOptions::default()).unwrap_err();
    assert!(matches!(bad, HarnessError::Config(_)));
}

#[test]
fn evaluator_swap_equals_running_that_evaluator() {
    let (dir, config) = synthetic("", "[[disruptions]]\nsteps = [{ kind = \"evaluator_swap\", evaluator = \"small\" }]");
    let rows = run(&config, &out(&dir, "x"), None);
    let direct = run_experiment(
        &config,
        &RunOptions { out_dir: Some(out(&dir, "y")), evaluator: Some("small".into()), ..Default::default() },
    )
    .unwrap()
    .rows;
    let swapped: Vec<_> = rows.iter().filter(|r| r.disruption == "evaluator_swap").collect();
    assert_eq!(swapped.len(), 9);
    for s in swapped {
        assert_eq!(s.evaluator, "small");
        let d = direct.iter().find(|r| r.disruption == "none" && r.metric == s.metric && r.mode == s.mode).unwrap();
        assert_eq!(d.n_correct, s.n_correct, "{} {}", s.metric, s.mode);
    }
}

#[test]
fn masks_in_the_grid_change_only_the_mode() {
    let (dir, mut config) =
        synthetic("", "[[disruptions]]\nsteps = [{ kind = \"query_mask\" }]\n[contrastive]\nkinds = [\"entropy\"]");
    config.metrics = vec![ccb_core::MetricKind::Entropy];
    config.modes = vec![ccb_core::Mode::Full];
    let cells = plan_cells(&config, None).unwrap();
    // 4 disruptions x 1 metric, plus the contrastive cell on the 3 mask-free ones.
    assert_eq!(cells.len(), 4 + 3);
    let rows = run(&config, &out(&dir, "m"), None);
    let masked = rows.iter().find(|r| r.disruption == "query_mask").unwrap();
    assert_eq!(masked.mode, "query_masked");
}

#[test]
fn score_cell_gives_one_record_per_candidate() {
    let (_dir, config) = synthetic("", "");
    let registry = config.build_registry().unwrap();
    let benchmarks = config.load_benchmarks().unwrap();
    let cells = plan_cells(&config, None).unwrap();
    let records = score_cell(&config, &registry, &benchmarks[0].1, &cells[0].cell).unwrap();
    assert_eq!(records.len(), 200);
    assert!(records.iter().all(|r| r.value.is_some() && r.diagnostic.is_none()));
    assert_eq!(records[10].item_id, "syn-01");
    assert_eq!(records[10].candidate, 0);
}

#[test]
fn config_errors_are_reported() {
    const BASE: &str = r#"
name = "t"
evaluators = ["lm"]
[[backends]]
kind = "table_lm"
id = "lm"
path = "lm.txt"
[[benchmarks]]
name = "b"
path = "b.jsonl"
"#;
    let bad = [
        format!("jobs = 0\n{BASE}"),
        format!("surprise = 1\n{BASE}"),
        BASE.replace("evaluators = [\"lm\"]", "evaluators = [\"nope\"]"),
        format!("{BASE}[[backends]]\nkind = \"table_lm\"\nid = \"lm\"\npath = \"x\"\n"),
        format!("{BASE}[contrastive]\nmasked_mode = \"full\"\n"),
        format!("{BASE}[contrastive]\nalpha = 2.0\n"),
        format!("{BASE}[[disruptions]]\nsteps = [{{ kind = \"evaluator_swap\", evaluator = \"ghost\" }}]\n"),
        format!("{BASE}[[disruptions]]\nsteps = [{{ kind = \"attention_mask\" }}, {{ kind = \"query_mask\" }}]\n"),
        BASE.replace("lm.txt", "${CCB_TEST_SURELY_UNSET_VARIABLE}"),
        format!("entropy_top_p = 0.0\n{BASE}"),
    ];
    for text in &bad {
        assert!(matches!(ExperimentConfig::parse(text, "/tmp"), Err(HarnessError::Config(_))), "{text}");
    }
    assert!(ExperimentConfig::parse(BASE, "/tmp").is_ok());

    let missing = ExperimentConfig::parse(BASE, "/nonexistent-dir").unwrap();
    assert!(run_experiment(&missing, &RunOptions::default()).is_err());

    let (dir, config) = synthetic("", "");
    fs::write(dir.path().join("candidates.jsonl"), fs::read(fixture("synthetic/questions.jsonl")).unwrap()).unwrap();
    let err = config.load_benchmarks().unwrap_err().to_string();
    assert!(err.contains("candidates"), "{err}");
}
