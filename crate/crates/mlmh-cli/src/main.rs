//! Command-line entry point.
//!
//! Settings come from three layers, highest precedence first: command-line
//! flags (the subcommand plus `--seed`, `--out`, `--paper-scale`), keys in
//! the `--config` JSON file, and built-in defaults. `--threads` (or the
//! `MLMC_THREADS` environment variable) sizes the worker pool; aggregation
//! is deterministic regardless of thread count. The process exits with 0
//! exactly when the command ran and every requested check passed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mlmh_cli::commands;
use mlmh_cli::config::{Mode, Overrides, RawConfig};

#[derive(Parser)]
#[command(
    name = "mlmh",
    version,
    about = "Multilevel coupled-chain MCMC experiment runner"
)]
struct Cli {
    /// Flat JSON config file; flags override its keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads (default: hardware parallelism; MLMC_THREADS as
    /// fallback).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Output directory override.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Restore the full 100-replica study scale.
    #[arg(long, global = true)]
    paper_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate weak-error, variance, and cost decay rates over replicated
    /// sweeps.
    Rates,
    /// Run the self-tuning continuation driver down to the target tolerance.
    Continuation,
    /// Verify the coupled kernel on a finite grid (1-D Gaussian problems).
    OracleCheck,
    /// Compare the coupled sampler against the sub-sampling baseline.
    BaselineCompare,
    /// One hierarchy sweep at fixed per-level sample counts.
    Run,
}

impl Command {
    fn mode(&self) -> Mode {
        match self {
            Command::Rates => Mode::Rates,
            Command::Continuation => Mode::Continuation,
            Command::OracleCheck => Mode::OracleCheck,
            Command::BaselineCompare => Mode::BaselineCompare,
            Command::Run => Mode::FixedRun,
        }
    }
}

fn thread_count(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| {
        std::env::var("MLMC_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
}

fn real_main() -> anyhow::Result<bool> {
    let cli = Cli::parse();

    if let Some(threads) = thread_count(cli.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()?;
    }

    let mut raw = match &cli.config {
        Some(path) => RawConfig::load(path)?,
        None => RawConfig::default(),
    };
    raw.apply(&Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        paper_scale: cli.paper_scale,
    });
    let cfg = raw.resolve(cli.command.mode())?;

    let passed = match cli.command {
        Command::Rates => {
            let report = commands::cmd_rates(&cfg)?;
            for row in &report.levels {
                println!(
                    "level {}: E|Y| = {:.6}, V[Y] = {:.6}, sync = {:.4}, marginal = {:.6} +- {:.6}",
                    row.level,
                    row.mean_abs_y,
                    row.var_y,
                    row.sync_rate,
                    row.marginal_mean,
                    row.marginal_se
                );
            }
            println!(
                "fits: alpha_w = {:.4} [{:.4}, {:.4}], beta = {:.4} [{:.4}, {:.4}], gamma = {:.4}",
                report.alpha_w.rate,
                report.alpha_w.ci_lo,
                report.alpha_w.ci_hi,
                report.beta.rate,
                report.beta.ci_lo,
                report.beta.ci_hi,
                report.gamma
            );
            report_files(&report.files);
            true
        }
        Command::Continuation => {
            let outcome = commands::cmd_continuation(&cfg)?;
            println!(
                "{}: estimate = {:.6}, te = {:.3e} vs tol^2 = {:.3e}, L = {}, {} iterations, work = {:.3e}",
                if outcome.converged { "converged" } else { "NOT CONVERGED" },
                outcome.estimate,
                outcome.te,
                outcome.tol * outcome.tol,
                outcome.finest_level,
                outcome.iterations,
                outcome.total_work
            );
            report_files(&outcome.files);
            outcome.converged
        }
        Command::OracleCheck => {
            let outcome = commands::cmd_oracle_check(&cfg)?;
            println!(
                "grid: [{:.3}, {:.3}] with {} points",
                outcome.grid_lo, outcome.grid_hi, outcome.grid_n
            );
            for row in &outcome.levels {
                println!(
                    "level {}: {} marginal_tv = {:.2e}, marginalization = {:.2e}, gamma_ps = {:.4}, \
                     mse {:.3e} <= {:.3e}, tv fit R^2 = {:.5}",
                    row.level,
                    if row.passed { "ok " } else { "FAIL" },
                    row.marginal_tv,
                    row.marginalization_err,
                    row.gamma_ps,
                    row.mse_empirical,
                    row.mse_bound,
                    row.tv_fit_r_squared
                );
            }
            report_files(&outcome.files);
            outcome.passed
        }
        Command::BaselineCompare => {
            let report = commands::cmd_baseline_compare(&cfg)?;
            for row in &report.rows {
                println!(
                    "level {} {:<11} mean = {:.6} +- {:.6}{}",
                    row.level,
                    row.method,
                    row.marginal_mean,
                    row.marginal_se,
                    row.deviation_se
                        .map(|d| format!(", off by {d:.2} SE"))
                        .unwrap_or_default()
                );
            }
            report_files(&report.files);
            true
        }
        Command::Run => {
            let report = commands::cmd_run(&cfg)?;
            println!(
                "estimate = {:.6}, total error^2 = {:.3e} (statistical {:.3e} + bias^2 {:.3e}), converged to tol {} = {}",
                report.estimate,
                report.error.total,
                report.error.statistical,
                report.error.bias_sq,
                report.error.tol,
                report.error.converged
            );
            report_files(&report.files);
            true
        }
    };

    Ok(passed)
}

fn report_files(files: &[PathBuf]) {
    for file in files {
        println!("wrote {}", file.display());
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
