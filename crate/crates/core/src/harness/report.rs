//! Report rows and their CSV, text and curve renderings.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::disruptions::DisruptionSpec;
use crate::selection::AccuracyReport;

use super::HarnessError;

pub const CSV_COLUMNS: [&str; 16] = [
    "benchmark", "generator", "evaluator", "metric", "mode", "sign", "alpha", "disruption", "unit", "limit",
    "seed", "n_items", "n_correct", "accuracy", "failures", "fingerprint",
];

/// One experimental cell and its accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub benchmark: String,
    pub generator: String,
    /// The evaluator after any swap.
    pub evaluator: String,
    pub metric: String,
    /// The conditioning mode after any mask; the masked mode for contrastive
    /// metrics.
    pub mode: String,
    pub sign: String,
    pub alpha: Option<f64>,
    pub disruption: String,
    pub unit: Option<String>,
    pub limit: Option<String>,
    pub seed: Option<u64>,
    pub n_items: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub failures: usize,
    pub fingerprint: String,
}

impl ReportRow {
    pub fn from_report(report: &AccuracyReport, generator: &str, disruption: &str, fingerprint: &str) -> Self {
        let m = &report.effective_metric;
        let mut unit = None;
        let mut limit = None;
        let mut seed = None;
        for spec in &report.cell.disruption {
            match spec {
                DisruptionSpec::Truncate { limit: l, unit: u } => {
                    unit = Some(u.as_str().to_owned());
                    limit = Some(l.to_string());
                }
                DisruptionSpec::Shuffle { seed: s } => seed = Some(*s),
                _ => {}
            }
        }
        ReportRow {
            benchmark: report.cell.benchmark.clone(),
            generator: generator.to_owned(),
            evaluator: m.evaluator.clone(),
            metric: m.metric_label(),
            mode: m.mode.as_str().to_owned(),
            sign: m.sign.as_str().to_owned(),
            alpha: m.alpha,
            disruption: disruption.to_owned(),
            unit,
            limit,
            seed,
            n_items: report.n_items,
            n_correct: report.n_correct,
            accuracy: report.accuracy,
            failures: report.failures,
            fingerprint: fingerprint.to_owned(),
        }
    }

    fn fields(&self) -> [String; 16] {
        let opt = |o: &Option<String>| o.clone().unwrap_or_default();
        [
            self.benchmark.clone(),
            self.generator.clone(),
            self.evaluator.clone(),
            self.metric.clone(),
            self.mode.clone(),
            self.sign.clone(),
            self.alpha.map(|a| a.to_string()).unwrap_or_default(),
            self.disruption.clone(),
            opt(&self.unit),
            opt(&self.limit),
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            self.n_items.to_string(),
            self.n_correct.to_string(),
            self.accuracy.to_string(),
            self.failures.to_string(),
            self.fingerprint.clone(),
        ]
    }

    /// Numeric value of `limit` for ordering; percentages sort after counts.
    fn limit_key(&self) -> (u8, f64) {
        match self.limit.as_deref() {
            None => (0, 0.0),
            Some(l) => match l.strip_suffix('%') {
                Some(p) => (2, p.parse().unwrap_or(0.0)),
                None => (1, l.parse().unwrap_or(0.0)),
            },
        }
    }

    fn cmp_key(&self, other: &Self) -> Ordering {
        let a = (&self.benchmark, &self.generator, &self.evaluator, &self.metric, &self.mode, &self.sign);
        let b = (&other.benchmark, &other.generator, &other.evaluator, &other.metric, &other.mode, &other.sign);
        a.cmp(&b)
            .then_with(|| cmp_opt_f64(self.alpha, other.alpha))
            .then_with(|| self.disruption.cmp(&other.disruption))
            .then_with(|| self.unit.cmp(&other.unit))
            .then_with(|| {
                let (x, y) = (self.limit_key(), other.limit_key());
                x.0.cmp(&y.0).then(x.1.total_cmp(&y.1))
            })
            .then_with(|| self.seed.cmp(&other.seed))
            .then_with(|| self.fields().cmp(&other.fields()))
    }
}

fn cmp_opt_f64(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
        (Some(x), Some(y)) => x.total_cmp(&y),
    }
}

/// Sorted copy without exact duplicates.
fn sorted(rows: &[ReportRow]) -> Vec<ReportRow> {
    let mut rows = rows.to_vec();
    rows.sort_by(ReportRow::cmp_key);
    rows.dedup();
    rows
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv of UTF-8 fields")
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut w = csv_writer();
    w.write_record(CSV_COLUMNS).expect("in-memory write");
    for row in sorted(rows) {
        w.write_record(row.fields()).expect("in-memory write");
    }
    finish(w)
}

/// Accuracy against truncation limit, one line per truncated cell.
pub fn render_curves(rows: &[ReportRow]) -> Option<String> {
    let rows: Vec<_> = sorted(rows).into_iter().filter(|r| r.limit.is_some()).collect();
    if rows.is_empty() {
        return None;
    }
    let mut w = csv_writer();
    w.write_record([
        "benchmark", "generator", "evaluator", "metric", "mode", "sign", "alpha", "disruption", "unit", "limit",
        "accuracy", "n_items",
    ])
    .expect("in-memory write");
    for r in rows {
        let f = r.fields();
        w.write_record([&f[0], &f[1], &f[2], &f[3], &f[4], &f[5], &f[6], &f[7], &f[8], &f[9], &f[13], &f[11]])
            .expect("in-memory write");
    }
    Some(finish(w))
}

/// Aligned table of all rows, then the mean accuracy of the three metric
/// kinds for every cell where all three were run.
pub fn render_text(rows: &[ReportRow]) -> String {
    let rows = sorted(rows);
    let header: Vec<String> = CSV_COLUMNS[..15].iter().map(|s| s.to_string()).collect();
    let body: Vec<Vec<String>> = rows.iter().map(|r| r.fields()[..15].to_vec()).collect();
    let mut out = table(&header, &body);

    let mut groups: BTreeMap<Vec<String>, Vec<(String, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.alpha.is_none()) {
        let f = r.fields();
        let key = vec![
            f[0].clone(), f[1].clone(), f[2].clone(), f[4].clone(), f[5].clone(), f[7].clone(), f[8].clone(),
            f[9].clone(), f[10].clone(),
        ];
        groups.entry(key).or_default().push((r.metric.clone(), r.accuracy));
    }
    let mean_rows: Vec<Vec<String>> = groups
        .into_iter()
        .filter_map(|(mut key, accs)| {
            let mut kinds: Vec<&str> = accs.iter().map(|(m, _)| m.as_str()).collect();
            kinds.sort();
            kinds.dedup();
            if kinds != ["entropy", "log_likelihood", "self_certainty"] || accs.len() != 3 {
                return None;
            }
            let mean = accs.iter().map(|(_, a)| a).sum::<f64>() / 3.0;
            key.push(format!("{mean:.4}"));
            Some(key)
        })
        .collect();
    if !mean_rows.is_empty() {
        out.push_str("\nmean over self_certainty, log_likelihood, entropy\n\n");
        let header: Vec<String> =
            ["benchmark", "generator", "evaluator", "mode", "sign", "disruption", "unit", "limit", "seed", "mean_accuracy"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        out.push_str(&table(&header, &mean_rows));
    }
    out
}

fn table(header: &[String], body: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut out, &rule);
    for row in body {
        line(&mut out, row);
    }
    out
}

/// Write `{stem}.csv`, `{stem}.txt` and, when truncation rows exist,
/// `{stem}_curves.csv` into `dir`. Returns the files written.
pub fn emit_report(rows: &[ReportRow], dir: &Path, stem: &str) -> Result<Vec<PathBuf>, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::Cell("no rows to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, content: String| -> Result<(), HarnessError> {
        let path = dir.join(name);
        fs::write(&path, content).map_err(|e| HarnessError::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    put(format!("{stem}.csv"), render_csv(rows))?;
    put(format!("{stem}.txt"), render_text(rows))?;
    if let Some(curves) = render_curves(rows) {
        put(format!("{stem}_curves.csv"), curves)?;
    }
    Ok(written)
}

/// Append rows as JSON lines.
pub fn write_rows(file: &mut fs::File, rows: &[ReportRow]) -> std::io::Result<()> {
    let mut buf = String::new();
    for r in rows {
        buf.push_str(&serde_json::to_string(r).expect("row serializes"));
        buf.push('\n');
    }
    file.write_all(buf.as_bytes())?;
    file.flush()
}

pub fn read_rows(path: &Path) -> Result<Vec<ReportRow>, HarnessError> {
    let file = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| HarnessError::Cell(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(rows)
}
