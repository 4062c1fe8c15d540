mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use taylor_shadow::{Error, ErrorCategory};

use crate::commands::Command;
use crate::config::{ExperimentConfig, Overrides};

/// Truncated Taylor integration with certified error bounds and shadowing searches.
#[derive(Parser)]
#[command(name = "taylor-shadow", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Build the sampling, integrate truncated and reference solutions, measure the error.
    Run(Common),
    /// `run` plus the error certificate and a sound/unsound verdict.
    Certify(Common),
    /// `certify` plus a search for a true solution shadowing the approximate one.
    Shadow(Common),
    /// Evaluate `shadow` over the configured parameter grid.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Truncation order.
    #[arg(long)]
    ell: Option<usize>,
    /// Budget rho in (0, 1).
    #[arg(long)]
    rho: Option<f64>,
    /// Uniform sampling step (replaces the configured sampling mode).
    #[arg(long)]
    h: Option<f64>,
    /// Sweep worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Seed for sweep jitter.
    #[arg(long)]
    seed: Option<u64>,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Infeasible => 2,
        ErrorCategory::Numerical => 3,
        ErrorCategory::Config => 4,
    }
}

fn execute(command: Command, args: &Common) -> taylor_shadow::Result<String> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.apply(&Overrides {
        ell: args.ell,
        rho: args.rho,
        h: args.h,
        workers: args.workers,
        seed: args.seed,
        out: args.out.clone(),
    });
    let out = Path::new(cfg.output_dir()).to_path_buf();
    if command == Command::Sweep {
        let report = commands::sweep(&cfg)?;
        commands::write_sweep(&report, &out)?;
        for row in report.rows.iter().filter(|r| r.status != "ok") {
            eprintln!("point {}: {}", row.index, row.status);
        }
        return Ok(format!(
            "sweep: {} points, {} failed; wrote {}",
            report.points,
            report.failed,
            out.join("sweep_summary.csv").display()
        ));
    }
    let outcome = commands::evaluate(command, &cfg)?;
    commands::write_outcome(&outcome, &out)?;
    let r = &outcome.report;
    let mut line = format!("max|e| = {:e}", r.measured.max_abs_error);
    if let (Some(c), Some(v)) = (&r.certificate, &r.verdict) {
        line += &format!(", epsilon = {:e}, verdict = {v:?}", c.epsilon);
    }
    if let Some(s) = &r.shadow {
        line += &format!(
            ", shadowed = {} (phi = {:e})",
            s.result.found, s.result.achieved_error
        );
    }
    Ok(format!(
        "{line}; wrote {}",
        out.join("run_report.json").display()
    ))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(4)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let (command, args) = match &cli.command {
        Sub::Run(a) => (Command::Run, a),
        Sub::Certify(a) => (Command::Certify, a),
        Sub::Shadow(a) => (Command::Shadow, a),
        Sub::Sweep(a) => (Command::Sweep, a),
    };
    match execute(command, args) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
