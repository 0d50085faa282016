//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always printed. Exact
//! property criteria (1-6, 10) fail the target when they fail; the directional
//! benchmark criteria (7-9) are reported but never abort the run, since they
//! measure the methods rather than the correctness of the code.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use driftgate::grcl::{GateConfig, GateMap, GateMemory};
use driftgate::harness::verify::{self, Check};
use driftgate::harness::{run_experiment, write_outputs, ExperimentConfig, ExperimentResult};
use driftgate::numerics::Rng;
use driftgate::stream::{DriftStream, StreamConfig};
use driftgate::trainer::{run_stream, Method, MethodConfig};

const SEED: u64 = 0;
const MEMORY_RATIO_MAX_MS: f64 = 1.0;
const GRADIENT_MAX_MS: f64 = 10_000.0;
const LASSO_MAX_MS: f64 = 30_000.0;
const GATE_MAX_MS: f64 = 5_000.0;
const GATE_K: usize = 73_728;
const GATE_UPPER: usize = 11_059;
const FREEZE_MIN_UPDATES: usize = 50;
const FOOTPRINT_FRAMES: usize = 10_000;
const FOOTPRINT_N: usize = 32;
const BENCH_MAX_MS: f64 = 15.0 * 60_000.0;
/// Required mean-J gain over the baseline.
const GAIN: f64 = 0.03;
/// Allowed dip when testing unimodal-or-plateau shape.
const SHAPE_TOL: f64 = 0.01;
const FROZEN_FRACTION: f64 = 0.9;

struct Line {
    id: usize,
    name: &'static str,
    exact: bool,
    passed: bool,
    detail: String,
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&configs_dir().join(name)).expect("shipped config loads");
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn from_check(id: usize, name: &'static str, c: Check, max_ms: f64) -> Line {
    let fast = c.elapsed_ms < max_ms;
    Line {
        id,
        name,
        exact: true,
        passed: c.passed && fast,
        detail: format!("{}; {:.1} ms (limit {max_ms} ms)", c.detail, c.elapsed_ms),
    }
}

/// Random gate sequences at the canonical parameter count must respect the
/// upper bound whenever two or more maps remain.
fn gate_dynamics() -> Line {
    let start = Instant::now();
    let mut rng = Rng::new(SEED);
    let mut worst = 0;
    let mut violations = 0;
    let mut updates = 0;
    for keep_initial in [true, false] {
        for _ in 0..8 {
            let cfg = GateConfig {
                keep_initial,
                ..Default::default()
            };
            let mut mem = GateMemory::new(GATE_K, cfg).unwrap();
            for step in 0..40u64 {
                // Popcounts from 0.5% to 12% of K, some maps overlapping the last one.
                let density = rng.range(0.005, 0.12);
                let prev = mem.maps().last().map(|m| m.bits().to_vec());
                let bits = (0..GATE_K)
                    .map(|i| match &prev {
                        Some(p) if p[i] && rng.uniform() < 0.5 => true,
                        _ => rng.uniform() < density,
                    })
                    .collect();
                let report = mem.maintain(GateMap::from_bits(bits, step)).unwrap();
                updates += 1;
                if report.maps >= 2 {
                    worst = worst.max(report.popcount);
                    violations += usize::from(report.popcount > GATE_UPPER);
                }
            }
        }
    }
    let bounds = verify::gate_bounds();
    let ms = start.elapsed().as_secs_f64() * 1e3;
    Line {
        id: 4,
        name: "gate dynamics",
        exact: true,
        passed: violations == 0 && bounds.passed && ms < GATE_MAX_MS,
        detail: format!(
            "{updates} updates, worst multi-map popcount {worst} <= {GATE_UPPER}, {violations} violations; {}; {ms:.0} ms (limit {GATE_MAX_MS} ms)",
            bounds.detail
        ),
    }
}

fn freeze_exactness() -> Line {
    let stream = DriftStream::new(StreamConfig {
        seed: SEED,
        ..Default::default()
    })
    .unwrap();
    let mut detail = Vec::new();
    let mut passed = true;
    for method in [Method::Grcl, Method::Hybrid] {
        let cfg = MethodConfig {
            update_interval: 4,
            memory_interval: 4,
            ..MethodConfig::with_method(method)
        };
        let out = run_stream(&stream, &cfg).unwrap();
        let updates = out.updates().len();
        let frozen: usize = out.updates().iter().map(|r| r.frozen_count).sum();
        passed &= updates >= FREEZE_MIN_UPDATES && out.freeze_violations == 0 && frozen > 0;
        detail.push(format!(
            "{method}: {updates} updates, {frozen} frozen param-updates, {} violations",
            out.freeze_violations
        ));
    }
    Line {
        id: 5,
        name: "freeze exactness",
        exact: true,
        passed,
        detail: detail.join("; "),
    }
}

fn footprint() -> Line {
    let peak = |frames: usize| {
        let stream = DriftStream::new(StreamConfig {
            segments: 4,
            frames_per_segment: frames / 4,
            holdout_per_segment: 2,
            seed: SEED,
            ..Default::default()
        })
        .unwrap();
        let cfg = MethodConfig {
            memory_capacity: FOOTPRINT_N,
            memory_interval: 1,
            update_interval: 250,
            ..MethodConfig::with_method(Method::Rmscl)
        };
        run_stream(&stream, &cfg).unwrap().peak_memory_slots
    };
    let short = peak(FOOTPRINT_FRAMES / 10);
    let long = peak(FOOTPRINT_FRAMES);
    Line {
        id: 6,
        name: "fixed footprint",
        exact: true,
        passed: long <= FOOTPRINT_N && short == long,
        detail: format!(
            "peak slots {short} at {} frames, {long} at {FOOTPRINT_FRAMES} frames, N={FOOTPRINT_N}",
            FOOTPRINT_FRAMES / 10
        ),
    }
}

fn forgetting_direction(r: &ExperimentResult, ms: f64) -> Line {
    let s = &r.summary;
    let base = s.entry("baseline").expect("baseline in grid");
    let mut passed = ms < BENCH_MAX_MS && r.failed_rows() == 0;
    let mut parts = vec![format!("baseline {:.4}±{:.4}", base.mean_j, base.std_j)];
    for m in ["grcl", "rmscl", "hybrid"] {
        let e = s.entry(m).expect("method in grid");
        let gain = e.mean_j >= base.mean_j + GAIN;
        let spread = e.std_j <= base.std_j;
        passed &= gain && spread;
        parts.push(format!(
            "{m} {:.4}±{:.4} (gain {:+.4} {}, spread {})",
            e.mean_j,
            e.std_j,
            e.mean_j - base.mean_j,
            if gain { "ok" } else { "short" },
            if spread { "ok" } else { "wider" }
        ));
    }
    parts.push(format!(
        "{:.0} s (limit {:.0} s)",
        ms / 1e3,
        BENCH_MAX_MS / 1e3
    ));
    Line {
        id: 7,
        name: "forgetting mitigation",
        exact: false,
        passed,
        detail: parts.join("; "),
    }
}

fn mas_direction(r: &ExperimentResult) -> Line {
    let mas = r.summary.entry("mas").expect("mas in grid").mean_j;
    let grcl = r.summary.entry("grcl").expect("grcl in grid").mean_j;
    Line {
        id: 8,
        name: "grcl vs mas",
        exact: false,
        passed: grcl >= mas,
        detail: format!("grcl {grcl:.4} vs mas {mas:.4}"),
    }
}

/// Non-decreasing up to the peak, non-increasing after it, within `tol`.
fn unimodal_or_plateau(values: &[f64], tol: f64) -> bool {
    let peak = values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best });
    values[..=peak].windows(2).all(|w| w[1] >= w[0] - tol)
        && values[peak..].windows(2).all(|w| w[1] <= w[0] + tol)
}

fn gate_ablation(r: &ExperimentResult) -> Line {
    let mut entries: Vec<_> = r
        .summary
        .entries
        .iter()
        .filter(|e| e.gate_capacity.is_some())
        .collect();
    entries.sort_by_key(|e| e.gate_capacity);
    let js: Vec<f64> = entries.iter().map(|e| e.mean_j).collect();
    let largest = entries
        .last()
        .and_then(|e| e.gate_capacity)
        .expect("gate grid is not empty");
    let (frozen, k): (f64, f64) = r
        .rows
        .iter()
        .filter(|row| row.gate_capacity == Some(largest))
        .filter_map(|row| Some((row.frozen_final? as f64, row.param_count? as f64)))
        .fold((0.0, 0.0), |(f, k), (a, b)| (f + a, k + b));
    let fraction = if k > 0.0 { frozen / k } else { 0.0 };
    let shape = unimodal_or_plateau(&js, SHAPE_TOL);
    let curve: Vec<String> = entries
        .iter()
        .zip(&js)
        .map(|(e, j)| format!("P={}:{j:.3}", e.gate_capacity.unwrap()))
        .collect();
    Line {
        id: 9,
        name: "gate-capacity ablation",
        exact: false,
        passed: shape && fraction > FROZEN_FRACTION && r.failed_rows() == 0,
        detail: format!(
            "{} ({}); final frozen fraction at P={largest} is {fraction:.3} (need > {FROZEN_FRACTION})",
            curve.join(" "),
            if shape { "unimodal or plateau" } else { "not unimodal" }
        ),
    }
}

fn determinism(scratch: &Path) -> Line {
    let mut csvs = Vec::new();
    for (i, jobs) in [0, 0, 1].into_iter().enumerate() {
        let dir = scratch.join(format!("det{i}"));
        let mut cfg = load("smoke.toml", &dir);
        cfg.jobs = jobs;
        let r = run_experiment(&cfg).unwrap();
        write_outputs(&r, &dir).unwrap();
        csvs.push(std::fs::read(dir.join("results.csv")).unwrap());
    }
    let same = csvs.windows(2).all(|w| w[0] == w[1]);
    Line {
        id: 10,
        name: "determinism",
        exact: true,
        passed: same && !csvs[0].is_empty(),
        detail: format!("smoke results.csv ({} bytes) identical across 2 parallel runs and 1 sequential run: {same}", csvs[0].len()),
    }
}

fn main() -> ExitCode {
    // libtest flags such as --list or filters are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let scratch = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut report = |l: Line| {
        println!(
            "{} [{}] {:>2} {}: {}",
            if l.passed { "PASS" } else { "FAIL" },
            if l.exact { "exact" } else { "directional" },
            l.id,
            l.name,
            l.detail
        );
        lines.push(l);
    };

    report(from_check(
        1,
        "memory accounting",
        verify::memory_accounting(),
        MEMORY_RATIO_MAX_MS,
    ));
    report(from_check(
        2,
        "gradient oracle",
        verify::gradient_oracle(50, SEED),
        GRADIENT_MAX_MS,
    ));
    report(from_check(
        3,
        "lasso oracle",
        verify::lasso_oracle(100, SEED),
        LASSO_MAX_MS,
    ));
    report(gate_dynamics());
    report(freeze_exactness());
    report(footprint());

    let start = Instant::now();
    let delta = run_experiment(&load("delta_sweep.toml", &scratch.path().join("delta"))).unwrap();
    let ms = start.elapsed().as_secs_f64() * 1e3;
    report(forgetting_direction(&delta, ms));
    report(mas_direction(&delta));

    let gate = run_experiment(&load("gate_capacity.toml", &scratch.path().join("gate"))).unwrap();
    report(gate_ablation(&gate));

    report(determinism(scratch.path()));

    let exact_failures = lines.iter().filter(|l| l.exact && !l.passed).count();
    let directional_failures = lines.iter().filter(|l| !l.exact && !l.passed).count();
    println!(
        "acceptance: {} of {} criteria pass; {exact_failures} exact and {directional_failures} directional failures",
        lines.iter().filter(|l| l.passed).count(),
        lines.len()
    );
    if exact_failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
