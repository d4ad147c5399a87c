//! `pionm`: trains fixed-coefficient solvers and boundary-conditioned
//! operators, runs the grid reference, and writes metrics and snapshots.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 non-convergence
//! (artifacts kept), 4 i/o failure.

mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use pionm::exec::Exec;

use crate::commands::Run;
use crate::config::{Command, RunConfig};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Device {
    /// All cores through the data-parallel path.
    Cpu,
    /// One thread.
    CpuSeq,
}

#[derive(Debug, Parser)]
#[command(name = "pionm", version, about = "Mean-field game solver with normalizing flows and a neural operator")]
struct Cli {
    #[arg(value_enum)]
    command: Command,

    /// JSON run configuration (see schema/run_config.schema.json).
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,

    /// Output directory; defaults to `<output root>/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Operator checkpoint, solution checkpoint, or a train-fixed output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Scenario family: obstacle-change, diffusion-change or init-terminal-change.
    #[arg(long, conflicts_with = "scenario")]
    family: Option<String>,

    /// Scenario JSON file.
    #[arg(long)]
    scenario: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "cpu")]
    device: Device,

    /// Default output root.
    #[arg(long, env = "PIONM_OUT", default_value = "runs")]
    out_root: PathBuf,
}

fn prepare(cli: Cli) -> Result<Run, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.family.is_some() {
        cfg.family = cli.family;
        cfg.scenario = None;
    }
    if cli.scenario.is_some() {
        cfg.scenario = cli.scenario;
        cfg.family = None;
    }
    if cli.checkpoint.is_some() {
        cfg.checkpoint = cli.checkpoint;
    }
    if cli.out.is_some() {
        cfg.out = cli.out;
    }
    cfg.validate(cli.command)?;
    let name = cli.command.to_possible_value().expect("named").get_name().to_string();
    let out = cfg.out.clone().unwrap_or_else(|| cli.out_root.join(name));
    let exec = match cli.device {
        Device::Cpu => Exec::Parallel,
        Device::CpuSeq => Exec::Sequential,
    };
    cfg.command = Some(cli.command);
    Ok(Run {
        command: cli.command,
        cfg,
        out,
        exec,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match prepare(cli).and_then(|run| run.execute()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pionm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
