use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use macroflow::commands;
use macroflow::config::RunConfig;

#[derive(Parser)]
#[command(name = "macroflow", version, about = "Flow-matching training over evolving macro libraries")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the training phase loop and write run artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (metrics.csv, trajectories.jsonl,
        /// curation.jsonl, checkpoint.txt).
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Check every exact flow identity on the configured environment.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Corrupt one state flow first; the conservation check must fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Enumerate the reachable DAG and dump node/edge records.
    #[command(alias = "enumerate")]
    DumpDag {
        #[arg(long)]
        config: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a trajectory dump into per-step credit and skill statistics.
    Diagnose {
        /// A trajectories.jsonl produced by `train`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the embedded per-step credit table.
    FixtureQ4,
}

fn load(config: &PathBuf, seed: Option<u64>) -> macroflow::Result<RunConfig> {
    let mut cfg = RunConfig::from_path(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run() -> macroflow::Result<bool> {
    match Cli::parse().cmd {
        Cmd::Train { config, seed, out, workers } => {
            let cfg = load(&config, seed)?;
            commands::cmd_train(&cfg, &out, workers.max(1))?;
            Ok(true)
        }
        Cmd::Verify { config, seed, inject_fault } => {
            let cfg = load(&config, seed)?;
            let report = commands::cmd_verify(&cfg, inject_fault)?;
            Ok(report.all_pass())
        }
        Cmd::DumpDag { config, out } => {
            let cfg = load(&config, None)?;
            match out {
                Some(path) => {
                    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
                    commands::cmd_dump_dag(&cfg, &mut w)?;
                }
                None => commands::cmd_dump_dag(&cfg, &mut std::io::stdout().lock())?,
            }
            Ok(true)
        }
        Cmd::Diagnose { input, out } => {
            match out {
                Some(path) => {
                    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
                    commands::cmd_diagnose(&input, &mut w)?;
                }
                None => commands::cmd_diagnose(&input, &mut std::io::stdout().lock())?,
            }
            Ok(true)
        }
        Cmd::FixtureQ4 => {
            commands::cmd_fixture_q4()?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
