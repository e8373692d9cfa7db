//! Cross-experiment comparison tables.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde::Serialize;

use crate::run::{describe, fmt_f64, load_summaries, RunStatus, RunSummary, SUMMARY_VERSION};
use crate::UsageError;

/// `(x − baseline) / baseline · 100`.
pub fn relative_change_pct(x: f64, baseline: f64) -> f64 {
    (x - baseline) / baseline * 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    /// `experiment` or `experiment/grid_label`.
    pub label: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub relative_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub metric: String,
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:>4}  {:>24}  {:>9}", "label", "n", self.metric, "rel. %")?;
        for r in &self.rows {
            let cell = format!("{:.4} ± {:.4}", r.mean, r.sd);
            let mark = if r.label == self.baseline { " (baseline)" } else { "" };
            writeln!(f, "{:<width$}  {:>4}  {:>24}  {:>+9.1}{mark}", r.label, r.n, cell, r.relative_pct)?;
        }
        Ok(())
    }
}

fn metric_value(s: &RunSummary, metric: &str) -> Option<f64> {
    match metric {
        "forwards" => Some(s.forwards as f64),
        "wall_clock_s" => Some(s.wall_clock_s),
        _ => s.metrics.get(metric).copied(),
    }
}

fn label(s: &RunSummary) -> String {
    if s.grid_label.is_empty() {
        s.experiment.clone()
    } else {
        format!("{}/{}", s.experiment, s.grid_label)
    }
}

/// Groups the successful runs below each directory by experiment and grid
/// point and reports `metric` relative to the group labelled `baseline`.
pub fn compare(dirs: &[PathBuf], metric: &str, baseline: &str) -> Result<ComparisonTable> {
    let mut all = Vec::new();
    for d in dirs {
        all.extend(load_summaries(d)?.into_iter().map(|s| (d.as_path(), s)));
    }
    compare_summaries(&all, metric, baseline)
}

pub fn compare_summaries(summaries: &[(&Path, RunSummary)], metric: &str, baseline: &str) -> Result<ComparisonTable> {
    if summaries.is_empty() {
        bail!(UsageError("no run summaries found".into()));
    }
    let kind = summaries[0].1.kind;
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for (dir, s) in summaries {
        if s.summary_version != SUMMARY_VERSION {
            bail!("schema mismatch: {} has summary version {}", dir.display(), s.summary_version);
        }
        if s.kind != kind {
            bail!("schema mismatch: {} mixes {:?} and {:?} experiments", dir.display(), kind, s.kind);
        }
        if s.status != RunStatus::Ok {
            continue;
        }
        let Some(v) = metric_value(s, metric) else {
            bail!("schema mismatch: run {} in {} has no metric {metric:?}", s.run_id, dir.display());
        };
        let l = label(s);
        match groups.iter_mut().find(|(g, _)| *g == l) {
            Some((_, vals)) => vals.push(v),
            None => groups.push((l, vec![v])),
        }
    }
    let Some((_, base_vals)) = groups.iter().find(|(l, _)| l == baseline) else {
        let known: Vec<&str> = groups.iter().map(|(l, _)| l.as_str()).collect();
        bail!(UsageError(format!("baseline {baseline:?} not found; known labels: {known:?}")));
    };
    let base = describe(base_vals).0;
    let rows = groups
        .iter()
        .map(|(l, vals)| {
            let (mean, sd, _) = describe(vals);
            ComparisonRow { label: l.clone(), n: vals.len(), mean, sd, relative_pct: relative_change_pct(mean, base) }
        })
        .collect();
    Ok(ComparisonTable { metric: metric.into(), baseline: baseline.into(), rows })
}

pub fn write_csv(table: &ComparisonTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "n", "mean", "sd", "relative_pct"])?;
    for r in &table.rows {
        w.write_record([r.label.clone(), r.n.to_string(), fmt_f64(r.mean), fmt_f64(r.sd), fmt_f64(r.relative_pct)])?;
    }
    w.flush()?;
    Ok(())
}
