//! `rngd` binary: run experiments, sweep step-size grids, self-check, and
//! generate synthetic datasets. See the library crate docs for the
//! artifact layout and exit codes.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rngd_cli::config::{ExperimentSpec, SweepSpec};
use rngd_cli::{check, config, runner, CliError};

#[derive(Parser)]
#[command(
    name = "rngd",
    about = "Inversion-free Riemannian natural-gradient experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment spec (JSON file).
    Run {
        /// Path to the experiment spec.
        spec: PathBuf,
    },
    /// Run a step-size grid over a base spec (JSON file with `base` and
    /// optional `grid`).
    Sweep {
        /// Path to the sweep spec.
        spec: PathBuf,
    },
    /// Run fast property suites; exits 1 if any check fails.
    Check {
        /// Suite to run (all when omitted): linalg, geometry, gradients,
        /// parsers, determinism.
        suite: Option<String>,
    },
    /// Generate a synthetic dataset file (CSV when the path ends in
    /// `.csv`, sparse text otherwise).
    GenData {
        /// Dataset kind: "logistic" or "multiclass-lowrank".
        kind: String,
        /// Output path.
        #[arg(short, long)]
        out: PathBuf,
        /// Number of rows.
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Feature dimension.
        #[arg(long, default_value_t = 20)]
        d: usize,
        /// Number of classes (multiclass kinds only).
        #[arg(long, default_value_t = 6)]
        k: usize,
        /// Planted rank (multiclass kinds only).
        #[arg(long, default_value_t = 2)]
        r: usize,
        /// Generation seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("rngd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Run { spec } => {
            let spec: ExperimentSpec = config::load_json(&spec)?;
            let report = runner::cmd_run(&spec)?;
            println!(
                "wrote {} traces, summary.csv, and plot.gp under {}",
                report.traces.len(),
                report.out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { spec } => {
            let spec: SweepSpec = config::load_json(&spec)?;
            let report = runner::cmd_sweep(&spec)?;
            println!(
                "wrote {} sweep rows under {}",
                report.rows.len(),
                report.out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { suite } => {
            let outcomes = check::run_checks(suite.as_deref())?;
            let mut failed = 0usize;
            for o in &outcomes {
                let verdict = if o.passed { "PASS" } else { "FAIL" };
                println!("{verdict} {}/{} — {}", o.suite, o.name, o.detail);
                if !o.passed {
                    failed += 1;
                }
            }
            println!("{} checks, {} failed", outcomes.len(), failed);
            Ok(if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::GenData {
            kind,
            out,
            n,
            d,
            k,
            r,
            seed,
        } => {
            runner::cmd_gen_data(&kind, n, d, k, r, seed, &out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
