//! Tab-separated series for external plotting tools.
//!
//! Each file is long-format, `series<TAB>x<TAB>y`, with one series per method
//! (or per run for gate counts) in first-appearance order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use super::run::{mean_std, read_results, ResultRow, METRICS_FILE};
use crate::error::{Error, Result};
use crate::trainer::Method;

pub const PLOT_DIR: &str = "plots";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// Retrospective Jaccard against the update step Δ.
    DeltaCurve,
    /// Retrospective Jaccard against the memory size N.
    MemoryCurve,
    /// Frozen-parameter count against the update index, per gating run.
    GatePopcount,
    /// MAS and GRCL Δ curves side by side.
    MasCompare,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [
        PlotKind::DeltaCurve,
        PlotKind::MemoryCurve,
        PlotKind::GatePopcount,
        PlotKind::MasCompare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::DeltaCurve => "delta-curve",
            PlotKind::MemoryCurve => "memory-curve",
            PlotKind::GatePopcount => "gate-popcount",
            PlotKind::MasCompare => "mas-compare",
        }
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown plot kind `{s}`")))
    }
}

/// A named series of points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotOutput {
    pub path: PathBuf,
    pub series: Vec<Series>,
    /// Expected series that had no data.
    pub warnings: Vec<String>,
}

/// Builds the series for `kind` from a results directory and writes
/// `<dir>/plots/<kind>.tsv`.
pub fn emit_plot_data(results_dir: &Path, kind: PlotKind) -> Result<PlotOutput> {
    let (series, warnings) = match kind {
        PlotKind::DeltaCurve => (
            curve(&read_results(results_dir)?, |r| r.delta_c, None),
            Vec::new(),
        ),
        PlotKind::MemoryCurve => (
            curve(&read_results(results_dir)?, |r| r.memory_size, None),
            Vec::new(),
        ),
        PlotKind::MasCompare => {
            let wanted = ["mas", "grcl"];
            let series = curve(&read_results(results_dir)?, |r| r.delta_c, Some(&wanted));
            let warnings = wanted
                .iter()
                .filter(|w| !series.iter().any(|s| s.name == **w))
                .map(|w| format!("no `{w}` rows in results"))
                .collect();
            (series, warnings)
        }
        PlotKind::GatePopcount => {
            let series = gate_series(&results_dir.join(METRICS_FILE))?;
            let warnings = if series.is_empty() {
                vec!["no gating runs in metrics".to_string()]
            } else {
                Vec::new()
            };
            (series, warnings)
        }
    };
    for w in &warnings {
        log::warn!("{}: {w}", kind.name());
    }
    let dir = results_dir.join(PLOT_DIR);
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}.tsv", kind.name()));
    fs::write(&path, render(&series))?;
    Ok(PlotOutput {
        path,
        series,
        warnings,
    })
}

fn render(series: &[Series]) -> String {
    let mut out = String::from("series\tx\ty\n");
    for s in series {
        for (x, y) in &s.points {
            out.push_str(&format!("{}\t{x}\t{y}\n", s.name));
        }
    }
    out
}

/// Seed- and remaining-axis-averaged `mean_j` against `x`, one series per method.
fn curve(
    rows: &[ResultRow],
    x: impl Fn(&ResultRow) -> usize,
    only: Option<&[&str]>,
) -> Vec<Series> {
    let mut order: Vec<String> = Vec::new();
    let mut points: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        if only.is_some_and(|o| !o.contains(&r.method.as_str())) {
            continue;
        }
        let Some(j) = r.mean_j else { continue };
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
        points.entry((r.method.clone(), x(r))).or_default().push(j);
    }
    order
        .into_iter()
        .map(|name| {
            let pts = points
                .range((name.clone(), 0)..=(name.clone(), usize::MAX))
                .map(|((_, x), js)| (*x as f64, mean_std(js).0))
                .collect();
            Series { name, points: pts }
        })
        .collect()
}

#[derive(Deserialize)]
struct MetricsRun {
    method: String,
    algorithm: Method,
    delta_c: usize,
    memory_size: usize,
    gate_capacity: Option<usize>,
    seed: u64,
    reports: Vec<GateCounts>,
}

#[derive(Deserialize)]
struct GateCounts {
    update_index: usize,
    frozen_count: usize,
}

fn gate_series(metrics: &Path) -> Result<Vec<Series>> {
    let file = fs::File::open(metrics)
        .map_err(|e| Error::Format(format!("{}: {e}", metrics.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let run: MetricsRun = serde_json::from_str(&line)?;
        if !run.algorithm.uses_gate() {
            continue;
        }
        let updates: Vec<&GateCounts> = run.reports.iter().filter(|r| r.update_index > 0).collect();
        let cap = run
            .gate_capacity
            .map_or("dyn".to_string(), |p| p.to_string());
        out.push(Series {
            name: format!(
                "{}/d{}/n{}/p{}/s{}",
                run.method, run.delta_c, run.memory_size, cap, run.seed
            ),
            points: updates
                .iter()
                .map(|r| (r.update_index as f64, r.frozen_count as f64))
                .collect(),
        });
    }
    Ok(out)
}
