//! Acceptance gate: one PASS/FAIL line per primary criterion.
//!
//! Runs without the libtest harness so the lines are printed even when
//! output capture is on. The process exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ccb_core::backend::{BackendRegistry, ScoringBackend, Statistic};
use ccb_core::harness::{run_experiment, ExperimentConfig, RunOptions};
use ccb_core::metrics::{
    compute, compute_contrastive, compute_full, compute_masked, Aggregation, ExactSum, MetricKind, Mode,
    SignConvention,
};
use ccb_core::selection::{evaluate, select_best, AccuracyReport, CellId, EvaluateOptions};
use ccb_core::trace::{load_benchmark, segment_spans, segment_trace, BenchmarkFormat, CandidateTrace, TaskType};
use ccb_core::ScoreRequest;

use common::{close, fixture, spec, RandomLm, Rng};

type Outcome = Result<String, String>;

const SIGNS: [SignConvention; 2] = [SignConvention::PaperLiteral, SignConvention::CertaintyAligned];

fn value(r: Result<Option<ccb_core::MetricValue>, ccb_core::metrics::MetricError>) -> Result<f64, String> {
    r.map_err(|e| e.to_string())?.map(|v| v.value).ok_or_else(|| "absent value".to_owned())
}

fn permuted(trace: &CandidateTrace, rng: &mut Rng) -> CandidateTrace {
    let mut texts: Vec<&str> = trace.steps.iter().map(|s| s.text.as_str()).collect();
    rng.shuffle(&mut texts);
    CandidateTrace::from_step_texts(texts, trace.final_answer.clone())
}

fn masked_permutation_invariance() -> Outcome {
    let mut rng = Rng::new(0xacce_0001);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let lm = RandomLm::random(&mut rng);
        let backend = lm.backend("lm");
        let k = rng.range(1, 6);
        let (trace, _) = lm.trace(&mut rng, k);
        let query = lm.query(&mut rng);
        let shuffled = permuted(&trace, &mut rng);
        for kind in MetricKind::ALL {
            for mode in [Mode::StepMasked, Mode::QueryMasked] {
                let s = spec(kind, mode, SignConvention::PaperLiteral);
                let a = value(compute_masked(&trace, &query, &s, &backend, mode))?;
                let b = value(compute_masked(&shuffled, &query, &s, &backend, mode))?;
                let d = (a - b).abs();
                worst = worst.max(d);
                if d > 1e-12 {
                    return Err(format!("case {case}: {kind:?}/{mode:?} {a} vs {b}"));
                }
            }
        }
    }
    // Cross-predictive fixture: each word predicts the next one, so the
    // order of the steps matters once they see each other.
    let mut rows = BTreeMap::new();
    rows.insert(vec![], vec![0.1, 0.3, 0.3, 0.3]);
    rows.insert(vec!["ab".to_owned()], vec![0.05, 0.05, 0.1, 0.8]);
    rows.insert(vec!["cd".to_owned()], vec![0.05, 0.8, 0.1, 0.05]);
    rows.insert(vec![".".to_owned()], vec![0.05, 0.05, 0.85, 0.05]);
    let lm = RandomLm { vocab: ["<unk>", ".", "ab", "cd"].map(String::from).to_vec(), order: 1, smoothing: 0.0, rows };
    let backend = lm.backend("lm");
    let trace = CandidateTrace::new("ab cd. cd ab.", TaskType::OpenEnded);
    let swapped = CandidateTrace::from_step_texts(trace.steps.iter().rev().map(|s| s.text.as_str()), None);
    let mut differs = false;
    for kind in MetricKind::ALL {
        let s = spec(kind, Mode::Full, SignConvention::PaperLiteral);
        let a = value(compute_full(&trace, "", &s, &backend))?;
        let b = value(compute_full(&swapped, "", &s, &backend))?;
        differs |= a != b;
    }
    if !differs {
        return Err("full-mode value did not change on the cross-predictive fixture".into());
    }
    Ok(format!("200 traces x 3 kinds x 2 modes, max |diff| = {worst:e}; full mode differs on the cross-predictive fixture"))
}

fn single_step_collapse() -> Outcome {
    let mut rng = Rng::new(0xacce_0002);
    for case in 0..300 {
        let lm = RandomLm::random(&mut rng);
        let backend = lm.backend("lm");
        let (trace, _) = lm.trace(&mut rng, 1);
        if trace.steps.len() != 1 {
            return Err(format!("case {case}: expected one step, got {}", trace.steps.len()));
        }
        let query = lm.query(&mut rng);
        for kind in MetricKind::ALL {
            for sign in SIGNS {
                let full = value(compute_full(&trace, &query, &spec(kind, Mode::Full, sign), &backend))?;
                let s = spec(kind, Mode::StepMasked, sign);
                let masked = value(compute_masked(&trace, &query, &s, &backend, Mode::StepMasked))?;
                if full.to_bits() != masked.to_bits() {
                    return Err(format!("case {case}: {kind:?} full {full} != step-masked {masked}"));
                }
            }
        }
    }
    Ok("300 single-step traces, 3 kinds x 2 signs, bit-identical".into())
}

fn closed_forms() -> Outcome {
    let mut rng = Rng::new(0xacce_0003);
    let mut checked = 0;
    for v in [3usize, 4, 5, 6, 8, 16] {
        let lm = RandomLm::uniform(v);
        let backend = lm.backend("lm");
        let log_v = (v as f64).ln();
        for _ in 0..25 {
            let n = rng.range(1, 12);
            let text: Vec<String> = (0..n).map(|_| lm.vocab[rng.below(v)].clone()).collect();
            let text = text.join(" ").replace(" .", ".");
            let trace = CandidateTrace::new(text.clone(), TaskType::OpenEnded);
            for mode in Mode::ALL {
                let expect = [
                    (MetricKind::LogLikelihood, -log_v),
                    (MetricKind::Entropy, log_v),
                    (MetricKind::SelfCertainty, -log_v),
                ];
                for (kind, want) in expect {
                    let got = value(compute(&trace, "w0", &spec(kind, mode, SignConvention::PaperLiteral), &backend))?;
                    if got != want {
                        return Err(format!("V={v} {kind:?}/{mode:?} on {text:?}: {got:?} != {want:?}"));
                    }
                    checked += 1;
                }
            }
        }
    }
    let mut rows = BTreeMap::new();
    rows.insert(vec![], vec![0.0, 0.0, 1.0, 0.0]);
    let point = RandomLm { vocab: ["<unk>", ".", "ab", "cd"].map(String::from).to_vec(), order: 0, smoothing: 0.0, rows };
    let backend = point.backend("lm");
    let trace = CandidateTrace::new("ab ab ab\nab ab", TaskType::OpenEnded);
    for mode in Mode::ALL {
        for kind in [MetricKind::LogLikelihood, MetricKind::Entropy] {
            let got = value(compute(&trace, "", &spec(kind, mode, SignConvention::PaperLiteral), &backend))?;
            if got != 0.0 {
                return Err(format!("point mass {kind:?}/{mode:?} gave {got:?}"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} exact comparisons (uniform V in {{3,4,5,6,8,16}}, point mass)"))
}

fn contrastive_identities() -> Outcome {
    let mut rng = Rng::new(0xacce_0004);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let lm = RandomLm::random(&mut rng);
        let backend = lm.backend("lm");
        let k = rng.range(1, 6);
        let (trace, _) = lm.trace(&mut rng, k);
        let query = lm.query(&mut rng);
        for kind in MetricKind::ALL {
            for sign in SIGNS {
                for masked in [Mode::StepMasked, Mode::QueryMasked] {
                    let s = spec(kind, Mode::Full, sign);
                    let full = value(compute_full(&trace, &query, &s, &backend))?;
                    let at = |a: f64| value(compute_contrastive(&trace, &query, &s, &backend, a, masked));
                    let (r0, r5, r1) = (at(0.0)?, at(0.5)?, at(1.0)?);
                    if r0.to_bits() != full.to_bits() {
                        return Err(format!("case {case}: alpha 0 gave {r0}, base {full}"));
                    }
                    let d = (r5 - (r0 + r1) / 2.0).abs();
                    worst = worst.max(d);
                    if d > 1e-12 {
                        return Err(format!("case {case}: not affine in alpha ({r0}, {r5}, {r1})"));
                    }
                }
            }
        }
        let (single, _) = lm.trace(&mut rng, 1);
        for kind in MetricKind::ALL {
            let s = spec(kind, Mode::Full, SignConvention::CertaintyAligned);
            let base = value(compute_full(&single, &query, &s, &backend))?;
            for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let c = value(compute_contrastive(&single, &query, &s, &backend, alpha, Mode::StepMasked))?;
                let d = (c - (1.0 - alpha) * base).abs();
                worst = worst.max(d);
                if d > 1e-12 {
                    return Err(format!("case {case}: single step alpha {alpha}: {c} vs {}", (1.0 - alpha) * base));
                }
            }
        }
    }
    Ok(format!("alpha 0 exact, affinity and single-step (1-alpha) scaling within {worst:e}"))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = Rng::new(0xacce_0005);
    let mut comparisons = 0;
    let mut worst = 0.0f64;
    for case in 0..500 {
        let lm = RandomLm::random(&mut rng);
        let backend = lm.backend("lm");
        let k = rng.range(1, 6);
        let (trace, steps) = lm.trace(&mut rng, k);
        let got_steps: Vec<&str> = trace.steps.iter().map(|s| s.text.as_str()).collect();
        if got_steps != steps {
            return Err(format!("case {case}: segmented {got_steps:?}, built {steps:?}"));
        }
        let query = lm.query(&mut rng);
        let sign = SIGNS[rng.below(2)];
        let aggregation = if rng.chance(0.2) { Aggregation::StepMean } else { Aggregation::TokenWeighted };
        for kind in MetricKind::ALL {
            for mode in Mode::ALL {
                let mut s = spec(kind, mode, sign);
                s.aggregation = aggregation;
                let got = value(compute(&trace, &query, &s, &backend))?;
                let want = lm
                    .oracle_metric(&trace, &query, kind, mode, sign, aggregation)
                    .ok_or_else(|| format!("case {case}: oracle found nothing to score"))?;
                worst = worst.max((got - want).abs());
                if !close(got, want, 1e-9) {
                    return Err(format!("case {case}: {kind:?}/{mode:?} got {got}, oracle {want}"));
                }
                comparisons += 1;
            }
        }
    }
    Ok(format!("{comparisons} comparisons, max |diff| = {worst:e}"))
}

fn chain_rule() -> Outcome {
    let mut rng = Rng::new(0xacce_0006);
    let mut splits = 0;
    let needs = Statistic::ALL;
    for case in 0..200 {
        let lm = RandomLm::random(&mut rng);
        let backend = lm.backend("lm");
        let k = rng.range(1, 4);
        let (trace, _) = lm.trace(&mut rng, k);
        let text = trace.raw_text.as_str();
        let context = lm.query(&mut rng);
        let whole = backend
            .score(&ScoreRequest::new("lm", context.clone(), text, needs).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let bytes = text.as_bytes();
        for i in 1..text.len() {
            let inside_word = bytes[i - 1].is_ascii_alphanumeric() && bytes[i].is_ascii_alphanumeric();
            let (head, tail) = text.split_at(i);
            if inside_word || head.trim().is_empty() || tail.trim().is_empty() {
                continue;
            }
            let first = backend.score(&ScoreRequest::new("lm", context.clone(), head, needs).unwrap()).unwrap();
            let second =
                backend.score(&ScoreRequest::new("lm", format!("{context}{head}"), tail, needs).unwrap()).unwrap();
            let joined: Vec<f64> = first.tokens.iter().chain(&second.tokens).map(|t| t.realized_logprob).collect();
            let direct: Vec<f64> = whole.tokens.iter().map(|t| t.realized_logprob).collect();
            if joined != direct {
                return Err(format!("case {case}: split at {i} of {text:?}: {joined:?} vs {direct:?}"));
            }
            let sum = |v: &[f64]| v.iter().copied().collect::<ExactSum>().value();
            let parts = sum(&[sum(&joined[..first.tokens.len()]), sum(&joined[first.tokens.len()..])]);
            if (parts - sum(&direct)).abs() > 1e-12 {
                return Err(format!("case {case}: summed parts {parts} vs {}", sum(&direct)));
            }
            splits += 1;
        }
    }
    Ok(format!("{splits} continuation splits compose token-for-token"))
}

fn golden_run() -> Outcome {
    let config = ExperimentConfig::load(&fixture("synthetic/synthetic.toml")).map_err(|e| e.to_string())?;
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let outcome = run_experiment(&config, &RunOptions { out_dir: Some(out.path().to_owned()), ..Default::default() })
        .map_err(|e| e.to_string())?;
    if !outcome.cell_errors.is_empty() {
        return Err(format!("cell errors: {:?}", outcome.cell_errors));
    }
    let got = std::fs::read(out.path().join("report.csv")).map_err(|e| e.to_string())?;
    let want = std::fs::read(fixture("golden/synthetic_report.csv")).map_err(|e| e.to_string())?;
    if got != want {
        return Err("report.csv differs from fixtures/golden/synthetic_report.csv".into());
    }
    let mut masked_cells = 0;
    for row in outcome.rows.iter().filter(|r| r.disruption == "shuffle" && r.mode != "full") {
        let none = outcome
            .rows
            .iter()
            .find(|r| r.disruption == "none" && r.metric == row.metric && r.mode == row.mode)
            .ok_or("missing none row")?;
        if (none.n_correct, none.accuracy) != (row.n_correct, row.accuracy) {
            return Err(format!("{} {}: shuffle {} vs none {}", row.metric, row.mode, row.n_correct, none.n_correct));
        }
        masked_cells += 1;
    }
    if masked_cells != 6 {
        return Err(format!("expected 6 masked shuffle cells, saw {masked_cells}"));
    }
    Ok(format!("{} rows byte-identical; shuffle == none on {masked_cells} masked cells", outcome.rows.len()))
}

fn selection_properties() -> Outcome {
    let mut rng = Rng::new(0xacce_0008);
    for case in 0..1000 {
        let n = rng.range(1, 12);
        let scores: Vec<Option<f64>> = (0..n)
            .map(|_| if rng.chance(0.15) { None } else { Some(rng.range(0, 2000) as f64 - 1000.0) })
            .collect();
        let a = 0.01 + 100.0 * rng.unit();
        let b = 1e3 * (rng.unit() - 0.5);
        let moved: Vec<Option<f64>> = scores.iter().map(|s| s.map(|x| a * x + b)).collect();
        if select_best(&scores) != select_best(&moved) {
            return Err(format!("case {case}: argmax moved under {a}*x + {b}: {scores:?}"));
        }
    }
    for n in 2..10 {
        for i in 0..n {
            for j in i + 1..n {
                let mut s: Vec<Option<f64>> = (0..n).map(|k| Some(-(k as f64) - 10.0)).collect();
                s[i] = Some(5.0);
                s[j] = Some(5.0);
                if select_best(&s) != Ok(i) {
                    return Err(format!("tie at {i} and {j} of {n} not broken to {i}"));
                }
            }
        }
    }
    if select_best(&[None, Some(f64::NAN), Some(-3.0)]) != Ok(2) {
        return Err("NaN or absent scores were selectable".into());
    }
    let items = load_benchmark(&fixture("three_items.jsonl"), BenchmarkFormat::Canonical).map_err(|e| e.to_string())?;
    let mut registry = BackendRegistry::new();
    registry.register(Arc::new(common::LengthBackend));
    let cell = CellId {
        benchmark: "three".into(),
        generator: "fixture".into(),
        metric: ccb_core::MetricSpec::new(MetricKind::LogLikelihood, Mode::Full, "length"),
        disruption: vec![],
    };
    let eval = evaluate(&items, cell, &registry, &EvaluateOptions::default()).map_err(|e| e.to_string())?;
    let chosen: Vec<Option<usize>> = eval.results.iter().map(|r| r.chosen_index).collect();
    if chosen != [Some(2), Some(2), Some(1)] || eval.report.n_correct != 1 || eval.report.accuracy != 1.0 / 3.0 {
        return Err(format!("three-item fixture: chosen {chosen:?}, report {:?}", eval.report));
    }
    if AccuracyReport::accuracy_of(7, 20) != 0.35 || AccuracyReport::accuracy_of(0, 0) != 0.0 {
        return Err("accuracy arithmetic".into());
    }
    Ok("1000 affine transforms, all tie positions up to n=9, three-item accuracy 1/3".into())
}

fn random_text(rng: &mut Rng) -> String {
    const PIECES: &[&str] = &[
        "a", "Word", "e.g.", "Dr.", "vs.", "1.", "12.", "3.14", ".", "..", "...", "!", "?!", "?", ")", "\"", "'", " ",
        "  ", "\n", "\n\n", "\t", "\u{00a0}", "é", "値", "\u{201d}", "-", ",", ";", "####", "\\boxed{4}", "",
    ];
    let n = rng.range(0, 40);
    (0..n).map(|_| PIECES[rng.below(PIECES.len())]).collect()
}

fn segmentation_partition() -> Outcome {
    let mut rng = Rng::new(0xacce_0009);
    let corpus = std::fs::read_to_string(fixture("prose_corpus.txt")).map_err(|e| e.to_string())?;
    let mut inputs: Vec<String> = (0..1000).map(|_| random_text(&mut rng)).collect();
    inputs.push(corpus.clone());
    inputs.extend(corpus.lines().map(str::to_owned));
    let mut exceptions = Vec::new();
    let mut steps_total = 0;
    for (n, text) in inputs.iter().enumerate() {
        let steps = segment_trace(text);
        steps_total += steps.len();
        let joined: String = steps.iter().map(|s| s.text.as_str()).collect();
        let spans = segment_spans(text);
        let contiguous = spans.windows(2).all(|w| w[0].end == w[1].start)
            && spans.first().map_or(text.is_empty(), |s| s.start == 0)
            && spans.last().map_or(true, |s| s.end == text.len());
        let nonempty = steps.iter().all(|s| !s.text.is_empty());
        if joined != *text || !contiguous || !nonempty {
            exceptions.push(n);
        }
    }
    if exceptions.is_empty() {
        Ok(format!("{} inputs ({steps_total} steps), zero exceptions", inputs.len()))
    } else {
        Err(format!("{} exceptions, first input {:?}", exceptions.len(), inputs[exceptions[0]]))
    }
}

/// Name, check and time budget.
type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn main() {
    let criteria: [Criterion; 9] = [
        ("masked-metric permutation invariance", masked_permutation_invariance, Some(Duration::from_secs(10))),
        ("single-step collapse", single_step_collapse, None),
        ("uniform and point-mass closed forms", closed_forms, None),
        ("contrastive identities", contrastive_identities, None),
        ("oracle equivalence", oracle_equivalence, Some(Duration::from_secs(30))),
        ("chain rule on the backend", chain_rule, None),
        ("end-to-end golden run", golden_run, Some(Duration::from_secs(60))),
        ("selection properties", selection_properties, None),
        ("segmentation partition", segmentation_partition, None),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(detail), Some(limit)) if elapsed > limit => Err(format!("{detail}; took {elapsed:?}, limit {limit:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({:.2?})", i + 1, elapsed),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why} ({:.2?})", i + 1, elapsed);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
