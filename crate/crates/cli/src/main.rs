use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use driftgate::harness::verify;
use driftgate::harness::{
    emit_plot_data, run_experiment, write_outputs, ExperimentConfig, PlotKind,
};
use driftgate::stream::{export_manifest, DriftStream, FrameSource, StreamConfig};

/// Exit status for an unreadable or invalid configuration.
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(
    name = "driftgate",
    version,
    about = "Continual target-model learning experiments under drift"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every grid point of an experiment config and write the result files.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (0 = all cores); overrides the config.
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write tab-separated plot data from a results directory.
    Plot {
        #[arg(long)]
        results: PathBuf,
        /// delta-curve, memory-curve, gate-popcount, mas-compare or all.
        #[arg(long, default_value = "all")]
        kind: String,
    },
    /// Write a synthetic stream from a config's [stream] table as a manifest directory.
    ExportStream {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle suite (gradients, LASSO optimality, gate bounds, memory accounting).
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, jobs, out } => run(config, jobs, out),
        Command::Plot { results, kind } => plot(results, &kind),
        Command::ExportStream { config, seed, out } => export(config, seed, out),
        Command::Verify { seed } => verify_all(seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e
                .chain()
                .any(|c| matches!(c.downcast_ref(), Some(driftgate::Error::Config(_))));
            ExitCode::from(if config_error { EXIT_CONFIG } else { 1 })
        }
    }
}

fn run(config: PathBuf, jobs: Option<usize>, out: Option<PathBuf>) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(&config)?;
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let result = run_experiment(&cfg)?;
    write_outputs(&result, &cfg.output_dir)
        .with_context(|| format!("writing results to {}", cfg.output_dir.display()))?;
    for e in &result.summary.entries {
        let p = e.gate_capacity.map_or("dyn".to_string(), |p| p.to_string());
        println!(
            "{:<10} N={:<4} P={:<4} J = {:.4} ± {:.4}  ({} runs, {} failed)",
            e.method, e.memory_size, p, e.mean_j, e.std_j, e.runs, e.failed
        );
    }
    println!("results in {}", cfg.output_dir.display());
    Ok(if result.failed_rows() > 0 {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn plot(results: PathBuf, kind: &str) -> Result<ExitCode> {
    let kinds = if kind == "all" {
        PlotKind::ALL.to_vec()
    } else {
        vec![kind.parse::<PlotKind>()?]
    };
    for k in kinds {
        let out = emit_plot_data(&results, k)?;
        println!(
            "{}: {} series -> {}",
            k.name(),
            out.series.len(),
            out.path.display()
        );
        for w in &out.warnings {
            eprintln!("warning: {}: {w}", k.name());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn export(config: PathBuf, seed: u64, out: PathBuf) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(&config)?;
    let stream = DriftStream::new(StreamConfig {
        seed,
        ..cfg.stream.unwrap_or_default()
    })?;
    let manifest = export_manifest(&stream, &out)?;
    println!("wrote {} frames to {}", stream.len(), manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn verify_all(seed: u64) -> Result<ExitCode> {
    let checks = verify::run_all(seed);
    for c in &checks {
        println!(
            "{} {:<18} {} ({:.0} ms)",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail,
            c.elapsed_ms
        );
    }
    Ok(if checks.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
