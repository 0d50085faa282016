//! Grid expansion, isolated execution of every grid point, and the three
//! output tiers: `results.csv`, `metrics.jsonl` and `summary.json`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Axis, ExperimentConfig};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::stream::{DriftStream, FrameSource, ManifestStream};
use crate::trainer::{run_stream, Method, MethodConfig, RunOutcome, TrainReport};

pub const RESULTS_FILE: &str = "results.csv";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// One run: a method variant at one grid point with one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    /// Position of the method in the config's method list.
    pub variant: usize,
    pub label: String,
    pub method: Method,
    pub delta_c: usize,
    pub delta_m: usize,
    pub memory_size: usize,
    /// `None` leaves the gate memory dynamically sized.
    pub gate_capacity: Option<usize>,
    pub seed: u64,
}

impl GridPoint {
    fn method_config(&self, base: &MethodConfig) -> MethodConfig {
        let mut cfg = base.clone();
        cfg.update_interval = self.delta_c;
        cfg.memory_interval = self.delta_m;
        cfg.memory_capacity = self.memory_size;
        cfg.gate.fixed_capacity = self.gate_capacity;
        cfg
    }
}

/// Expands the sweep: method-major, then memory size, gate capacity, Δ and seed.
pub fn expand_grid(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<GridPoint> {
    let s = &cfg.sweep;
    let mut points = Vec::new();
    for (variant, m) in cfg.methods.iter().enumerate() {
        let memories = if s.varies(Axis::Memory) {
            s.memory_sizes.clone()
        } else {
            vec![m.memory_capacity]
        };
        let gates: Vec<Option<usize>> = if s.varies(Axis::Gate) {
            s.gate_capacities.iter().copied().map(Some).collect()
        } else {
            vec![m.gate.fixed_capacity]
        };
        let deltas: Vec<(usize, usize)> = if s.varies(Axis::Delta) {
            s.deltas.iter().map(|&d| (d, d)).collect()
        } else {
            vec![(m.update_interval, m.memory_interval)]
        };
        for &memory_size in &memories {
            for &gate_capacity in &gates {
                for &(delta_c, delta_m) in &deltas {
                    for &seed in seeds {
                        points.push(GridPoint {
                            variant,
                            label: m.display_label(),
                            method: m.method,
                            delta_c,
                            delta_m,
                            memory_size,
                            gate_capacity,
                            seed,
                        });
                    }
                }
            }
        }
    }
    points
}

/// A row of `results.csv`. Empty cells mean "not applicable" or "failed".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub delta_c: usize,
    pub delta_m: usize,
    pub memory_size: usize,
    pub gate_capacity: Option<usize>,
    pub seed: u64,
    pub status: String,
    /// Retrospective Jaccard: mean over segments of the final snapshot.
    pub mean_j: Option<f64>,
    /// Spread of `mean_j` over the Δ grid for this method, N, P and seed.
    pub j_std_delta: Option<f64>,
    pub forgetting: Option<f64>,
    /// Mean per-frame Jaccard of the online predictions.
    pub online_j: Option<f64>,
    pub updates: Option<usize>,
    pub param_count: Option<usize>,
    pub frozen_mean: Option<f64>,
    pub frozen_max: Option<usize>,
    pub frozen_final: Option<usize>,
    pub error: String,
}

pub const STATUS_OK: &str = "ok";
pub const STATUS_FAILED: &str = "failed";

/// Everything recorded for one grid point.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub point: GridPoint,
    pub runtime_ms: f64,
    pub outcome: std::result::Result<RunOutcome, String>,
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    method: &'a str,
    algorithm: Method,
    delta_c: usize,
    delta_m: usize,
    memory_size: usize,
    gate_capacity: Option<usize>,
    seed: u64,
    status: &'a str,
    error: Option<&'a str>,
    runtime_ms: f64,
    retrospective_jaccard: Option<f64>,
    jaccard: Option<&'a [Vec<f64>]>,
    peak_memory_slots: Option<usize>,
    reports: &'a [TrainReport],
}

/// Table-style aggregate for one method variant at one (N, P) point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub method: String,
    pub memory_size: usize,
    pub gate_capacity: Option<usize>,
    /// Seed-averaged `mean_j` at each Δ, in grid order.
    pub per_delta: Vec<DeltaPoint>,
    /// Mean over the Δ grid of the seed-averaged retrospective Jaccard.
    pub mean_j: f64,
    /// Population standard deviation over the Δ grid.
    pub std_j: f64,
    pub mean_forgetting: Option<f64>,
    pub runs: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaPoint {
    pub delta_c: usize,
    pub delta_m: usize,
    pub mean_j: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: Option<String>,
    pub seeds: Vec<u64>,
    pub entries: Vec<SummaryEntry>,
}

impl Summary {
    pub fn entry(&self, method: &str) -> Option<&SummaryEntry> {
        self.entries.iter().find(|e| e.method == method)
    }
}

pub struct ExperimentResult {
    pub records: Vec<RunRecord>,
    pub rows: Vec<ResultRow>,
    pub summary: Summary,
}

impl ExperimentResult {
    pub fn failed_rows(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.status == STATUS_FAILED)
            .count()
    }
}

enum Source {
    Stream(crate::stream::StreamConfig),
    Manifest(ManifestStream),
}

/// Runs every grid point. Failures are recorded per point; only problems that
/// prevent the whole experiment (unreadable manifest, bad seeds) are errors.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let seeds = cfg.effective_seeds()?;
    let source = match &cfg.manifest {
        Some(path) => Source::Manifest(ManifestStream::open(path)?),
        None => Source::Stream(cfg.stream.clone().unwrap_or_default()),
    };
    let points = expand_grid(cfg, &seeds);
    if cfg.sweep.varies(Axis::Gate) {
        for m in cfg.methods.iter().filter(|m| !m.method.uses_gate()) {
            log::warn!("gate capacity has no effect on {}", m.display_label());
        }
    }
    let exec = if cfg.jobs == 1 {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let jobs = if cfg.jobs == 0 {
        available_jobs()
    } else {
        cfg.jobs
    };
    let total = points.len();
    let records = par::with_pool(exec, jobs, || {
        par::map(exec, &points, |point| {
            let record = run_point(point, &cfg.methods[point.variant], &source);
            match &record.outcome {
                Ok(o) => log::info!(
                    "{} Δ={} N={} seed={}: J={:.4} ({:.0} ms)",
                    point.label,
                    point.delta_c,
                    point.memory_size,
                    point.seed,
                    o.retrospective_jaccard,
                    record.runtime_ms
                ),
                Err(e) => log::warn!(
                    "{} Δ={} seed={} failed: {e}",
                    point.label,
                    point.delta_c,
                    point.seed
                ),
            }
            record
        })
    });
    log::info!("{total} runs finished");
    let rows = build_rows(&records);
    let summary = summarize(cfg.name.clone(), seeds, &rows);
    Ok(ExperimentResult {
        records,
        rows,
        summary,
    })
}

fn available_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn run_point(point: &GridPoint, base: &MethodConfig, source: &Source) -> RunRecord {
    let start = Instant::now();
    let cfg = point.method_config(base);
    let outcome = match source {
        Source::Stream(stream) => {
            let stream = crate::stream::StreamConfig {
                seed: point.seed,
                ..stream.clone()
            };
            DriftStream::new(stream).and_then(|s| run_stream(&s as &dyn FrameSource, &cfg))
        }
        Source::Manifest(m) => run_stream(m, &cfg),
    };
    RunRecord {
        point: point.clone(),
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
        outcome: outcome.map_err(|e| e.to_string()),
    }
}

fn build_rows(records: &[RunRecord]) -> Vec<ResultRow> {
    let mut rows: Vec<ResultRow> = records.iter().map(row_for).collect();
    // Spread of J over the Δ grid, per (variant, N, P, seed).
    let mut groups: BTreeMap<(usize, usize, Option<usize>, u64), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let p = &r.point;
        groups
            .entry((p.variant, p.memory_size, p.gate_capacity, p.seed))
            .or_default()
            .push(i);
    }
    for members in groups.values() {
        let js: Vec<f64> = members.iter().filter_map(|&i| rows[i].mean_j).collect();
        if js.is_empty() {
            continue;
        }
        let (_, std) = mean_std(&js);
        for &i in members {
            if rows[i].mean_j.is_some() {
                rows[i].j_std_delta = Some(std);
            }
        }
    }
    rows
}

fn row_for(record: &RunRecord) -> ResultRow {
    let p = &record.point;
    let mut row = ResultRow {
        method: p.label.clone(),
        delta_c: p.delta_c,
        delta_m: p.delta_m,
        memory_size: p.memory_size,
        gate_capacity: p.gate_capacity,
        seed: p.seed,
        status: STATUS_OK.into(),
        mean_j: None,
        j_std_delta: None,
        forgetting: None,
        online_j: None,
        updates: None,
        param_count: None,
        frozen_mean: None,
        frozen_max: None,
        frozen_final: None,
        error: String::new(),
    };
    match &record.outcome {
        Ok(o) => {
            let frozen: Vec<usize> = o.updates().iter().map(|r| r.frozen_count).collect();
            row.mean_j = Some(o.retrospective_jaccard);
            row.forgetting = o.forgetting;
            row.online_j =
                Some(o.online_jaccard.iter().sum::<f64>() / o.online_jaccard.len().max(1) as f64);
            row.updates = Some(frozen.len());
            row.param_count = Some(o.final_model.param_count());
            if !frozen.is_empty() {
                row.frozen_mean = Some(frozen.iter().sum::<usize>() as f64 / frozen.len() as f64);
                row.frozen_max = frozen.iter().copied().max();
                row.frozen_final = frozen.last().copied();
            }
        }
        Err(e) => {
            row.status = STATUS_FAILED.into();
            row.error = e.clone();
        }
    }
    row
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Averages over seeds at each Δ, then reports mean and spread across Δ.
pub fn summarize(name: Option<String>, seeds: Vec<u64>, rows: &[ResultRow]) -> Summary {
    type Key = (String, usize, Option<usize>);
    let mut order: Vec<Key> = Vec::new();
    let mut by_key: BTreeMap<Key, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.method.clone(), r.memory_size, r.gate_capacity);
        if !by_key.contains_key(&key) {
            order.push(key.clone());
        }
        by_key.entry(key).or_default().push(r);
    }
    let entries = order
        .into_iter()
        .map(|key| {
            let members = &by_key[&key];
            let mut deltas: Vec<(usize, usize)> = Vec::new();
            for r in members {
                if !deltas.contains(&(r.delta_c, r.delta_m)) {
                    deltas.push((r.delta_c, r.delta_m));
                }
            }
            let per_delta: Vec<DeltaPoint> = deltas
                .into_iter()
                .filter_map(|(dc, dm)| {
                    let js: Vec<f64> = members
                        .iter()
                        .filter(|r| r.delta_c == dc && r.delta_m == dm)
                        .filter_map(|r| r.mean_j)
                        .collect();
                    (!js.is_empty()).then(|| DeltaPoint {
                        delta_c: dc,
                        delta_m: dm,
                        mean_j: mean_std(&js).0,
                    })
                })
                .collect();
            let js: Vec<f64> = per_delta.iter().map(|d| d.mean_j).collect();
            let (mean_j, std_j) = if js.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                mean_std(&js)
            };
            let forgetting: Vec<f64> = members.iter().filter_map(|r| r.forgetting).collect();
            SummaryEntry {
                method: key.0.clone(),
                memory_size: key.1,
                gate_capacity: key.2,
                per_delta,
                mean_j,
                std_j,
                mean_forgetting: (!forgetting.is_empty()).then(|| mean_std(&forgetting).0),
                runs: members.len(),
                failed: members.iter().filter(|r| r.status == STATUS_FAILED).count(),
            }
        })
        .collect();
    Summary {
        name,
        seeds,
        entries,
    }
}

/// Writes the three output files into `dir`, creating it if needed.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = csv::Writer::from_path(dir.join(RESULTS_FILE))?;
    for row in &result.rows {
        csv.serialize(row)?;
    }
    csv.flush()?;

    let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    for rec in &result.records {
        let p = &rec.point;
        let ok = rec.outcome.as_ref().ok();
        let line = MetricsLine {
            method: &p.label,
            algorithm: p.method,
            delta_c: p.delta_c,
            delta_m: p.delta_m,
            memory_size: p.memory_size,
            gate_capacity: p.gate_capacity,
            seed: p.seed,
            status: if ok.is_some() {
                STATUS_OK
            } else {
                STATUS_FAILED
            },
            error: rec.outcome.as_ref().err().map(String::as_str),
            runtime_ms: rec.runtime_ms,
            retrospective_jaccard: ok.map(|o| o.retrospective_jaccard),
            jaccard: ok.map(|o| o.jaccard.as_slice()),
            peak_memory_slots: ok.map(|o| o.peak_memory_slots),
            reports: ok.map_or(&[], |o| o.reports.as_slice()),
        };
        serde_json::to_writer(&mut metrics, &line)?;
        metrics.write_all(b"\n")?;
    }
    metrics.flush()?;

    let file = File::create(dir.join(SUMMARY_FILE))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &result.summary)?;
    Ok(())
}

/// Reads `results.csv` back.
pub fn read_results(dir: &Path) -> Result<Vec<ResultRow>> {
    let path = dir.join(RESULTS_FILE);
    let mut reader = csv::Reader::from_path(&path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
