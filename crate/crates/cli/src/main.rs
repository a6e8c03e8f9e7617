use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use stormsim::harness::{
    self, fit::DropSetup, parse_values, read_anchors, run_experiment, run_sweep, ExperimentConfig,
    SweepAxis,
};
use stormsim::nic::Preset;
use stormsim::sim::EventLog;

/// Simulated RDMA cluster experiments.
#[derive(Parser)]
#[command(name = "stormsim", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Results CSV path; defaults to the config's `out`, else stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's preset file.
    #[arg(long)]
    preset: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and write its results CSV.
    Run(RunArgs),
    /// Run an experiment once per value along an axis.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// msg_size, connections or nodes.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; `a..b` expands to powers of two.
        #[arg(long)]
        values: String,
    },
    /// Calibrate a preset against latency and throughput-drop anchors.
    Fit {
        /// Anchors CSV with `kind,op,size,target` rows.
        #[arg(long)]
        anchors: PathBuf,
        /// Prior preset supplying every constant the fit does not touch.
        #[arg(long)]
        preset: PathBuf,
        /// Where to write the fitted preset.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a markdown breakdown report from a results CSV.
    Report {
        results: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit status plus the error to print. Bad input exits 2; failures while
/// running exit 1.
struct Failure(u8, anyhow::Error);

fn bad_input(e: impl Into<anyhow::Error>) -> Failure {
    Failure(2, e.into())
}

fn failed(e: impl Into<anyhow::Error>) -> Failure {
    Failure(1, e.into())
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load_with_preset(&args.config, args.preset.as_deref())
        .map_err(bad_input)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn output_path(args: &RunArgs, cfg: &ExperimentConfig) -> Option<PathBuf> {
    args.out.clone().or_else(|| {
        cfg.out
            .as_ref()
            .map(|o| args.config.parent().unwrap_or(Path::new(".")).join(o))
    })
}

/// Event log named by `STORMSIM_LOG`, if set.
fn event_log() -> Result<Option<EventLog>, Failure> {
    let Some(path) = std::env::var_os("STORMSIM_LOG") else {
        return Ok(None);
    };
    let file = File::create(&path)
        .with_context(|| format!("creating event log {}", Path::new(&path).display()))
        .map_err(failed)?;
    Ok(Some(EventLog::new(Box::new(BufWriter::new(file)))))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(failed),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(failed),
    }
}

fn finish_log(log: Option<EventLog>) -> Result<(), Failure> {
    if let Some(mut log) = log {
        log.flush().context("flushing event log").map_err(failed)?;
    }
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let log = event_log()?;
    let rows = run_experiment(&cfg, log.clone()).map_err(failed)?;
    finish_log(log)?;
    write_output(
        output_path(args, &cfg).as_deref(),
        &harness::to_csv_string(&rows),
    )
}

fn cmd_sweep(args: &RunArgs, axis: &str, values: &str) -> Result<(), Failure> {
    let axis = SweepAxis::parse(axis).ok_or_else(|| {
        bad_input(anyhow::anyhow!(
            "unknown axis `{axis}`; expected msg_size, connections or nodes"
        ))
    })?;
    let values = parse_values(values).map_err(|m| bad_input(anyhow::anyhow!(m)))?;
    let cfg = load_config(args)?;
    let log = event_log()?;
    let rows = run_sweep(&cfg, axis, &values, log.clone()).map_err(|e| match e {
        harness::RunError::Sweep(_) => bad_input(e),
        _ => failed(e),
    })?;
    finish_log(log)?;
    write_output(
        output_path(args, &cfg).as_deref(),
        &harness::to_csv_string(&rows),
    )
}

fn cmd_fit(anchors: &Path, prior: &Path, out: &Path) -> Result<(), Failure> {
    let prior = Preset::load(prior).map_err(bad_input)?;
    let file = File::open(anchors)
        .with_context(|| format!("opening {}", anchors.display()))
        .map_err(bad_input)?;
    let anchors = read_anchors(file).map_err(bad_input)?;
    let mut report =
        harness::fit(&prior, &anchors, &DropSetup::default()).map_err(|e| match e {
            harness::FitError::Workload(_) => failed(e),
            _ => bad_input(e),
        })?;
    if let Some(stem) = out.file_stem() {
        report.preset.name = stem.to_string_lossy().into_owned();
    }
    println!("{report}");
    write_output(Some(out), &report.preset.to_text())
}

fn cmd_report(results: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let file = File::open(results)
        .with_context(|| format!("opening {}", results.display()))
        .map_err(bad_input)?;
    let rows = harness::read_rows(file).map_err(bad_input)?;
    write_output(out, &harness::render(&rows))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Sweep { run, axis, values } => cmd_sweep(run, axis, values),
        Cmd::Fit {
            anchors,
            preset,
            out,
        } => cmd_fit(anchors, preset, out),
        Cmd::Report { results, out } => cmd_report(results, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
