//! Command-line front end for the treedoc simulator.
//!
//! `run` executes a scenario file; `fuzz` generates a seeded random event
//! sequence, drives it to quiescence, and checks convergence. Both report
//! as JSON-lines on stdout: one `summary` object, plus a `metrics` object
//! with `--metrics`. `--trace` writes the executed event sequence in the
//! scenario text format, and `run` on a fuzz-emitted trace reproduces the
//! fuzz run's report exactly.
//!
//! Exit codes: 0 when every check passed, 1 when a check failed, 2 when
//! the input or invocation was unusable.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use treedoc::sim::fuzz::{run_fuzz, FaultProfile, FuzzConfig};
use treedoc::sim::{parse_scenario, Metrics, Summary, World};

#[derive(Parser)]
#[command(name = "treedoc", version)]
#[command(about = "Deterministic multi-site simulator for a replicated sequence")]
struct Cli {
    /// Append a `metrics` JSON line to the report.
    #[arg(long, global = true)]
    metrics: bool,

    /// Write the executed event trace to this file, in the scenario
    /// format `run` accepts.
    #[arg(long, global = true, value_name = "OUT")]
    trace: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario file and report whether its checks passed.
    Run {
        /// Scenario text: a `sites N` header, then one event per line.
        /// Blank lines and `#` comments are skipped.
        file: PathBuf,
    },
    /// Generate and run a random event sequence, then drain the network
    /// and check that all live replicas converge.
    Fuzz {
        /// Seed for the event generator; the same seed reproduces the
        /// same trace and report.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Initial number of sites.
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
        sites: u32,
        /// Events to generate before draining.
        #[arg(long, default_value_t = 200)]
        ops: usize,
        /// Fault injection profile: none, partition, crash, or
        /// partition-crash.
        #[arg(long, default_value_t = FaultProfile::None)]
        faults: FaultProfile,
    },
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    summary: &'a Summary,
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    metrics: &'a Metrics,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn execute(cli: &Cli) -> Result<ExitCode, String> {
    let (trace_text, summary, metrics) = match &cli.command {
        Command::Run { file } => {
            let text = fs::read_to_string(file)
                .map_err(|e| format!("{}: {e}", file.display()))?;
            let scenario = parse_scenario(&text).map_err(|e| e.to_string())?;
            let world = World::run(&scenario).map_err(|e| e.to_string())?;
            (scenario.to_string(), world.summary(), world.metrics())
        }
        Command::Fuzz { seed, sites, ops, faults } => {
            let cfg = FuzzConfig { seed: *seed, sites: *sites, ops: *ops, faults: *faults };
            let out = run_fuzz(&cfg).map_err(|e| e.to_string())?;
            let header = format!(
                "# fuzz seed={} sites={} ops={} faults={}\n",
                cfg.seed, cfg.sites, cfg.ops, cfg.faults
            );
            (format!("{header}{}", out.scenario), out.summary, out.metrics)
        }
    };
    if let Some(path) = &cli.trace {
        fs::write(path, &trace_text).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    let line = |s: String| {
        println!("{s}");
    };
    line(serde_json::to_string(&SummaryLine { summary: &summary }).map_err(|e| e.to_string())?);
    if cli.metrics {
        line(serde_json::to_string(&MetricsLine { metrics: &metrics }).map_err(|e| e.to_string())?);
    }
    Ok(if summary.checks_failed > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}
