//! The experiment commands behind the subcommands.
//!
//! Every command follows the same shape: resolve the problem from the
//! configuration, run the requested study with deterministic seeds, write the
//! result files (CSV for per-level tables, JSON for nested reports), and
//! return a report struct that also says whether all requested checks passed.
//! Reruns with the same configuration byte-reproduce every file.

use std::path::PathBuf;

use anyhow::Context;
use mlmh::estimator::{self, LevelStats};
use mlmh::oracle::{self, GridSpec};
use mlmh::problems::{self, baseline, gaussian};
use mlmh::sampler::{self, ChainRun, HierarchyOptions};
use mlmh::tuner::{self, ContinuationConfig, IterationRecord, TunerError};
use mlmh::{Point, Real};
use serde::Serialize;
use serde_json::json;

use crate::config::{ConfigError, RunConfig};
use crate::output::{cell, opt_cell, write_csv, write_json, Meta};

/// Half-width factor of the normal-approximation 95% intervals.
pub const CI_Z: Real = 1.96;

/// Grid side length used by the oracle command.
pub const ORACLE_GRID_N: usize = 64;
/// The oracle grid spans this many standard deviations around every target
/// and the proposal.
pub const ORACLE_SUPPORT_SIGMAS: Real = 6.0;
/// Chain length of the empirical mean-square-error check.
pub const ORACLE_MSE_SAMPLES: usize = 500;
/// Replicas of the empirical mean-square-error check.
pub const ORACLE_MSE_REPLICAS: usize = 10_000;
/// Largest accepted total variation between stationary marginals and the
/// discretized targets.
pub const MARGINAL_TV_TOL: Real = 1e-3;
/// Largest accepted entry difference between the marginalized pair matrix
/// and the directly built single-level matrices.
pub const MARGINALIZATION_TOL: Real = 1e-12;
/// Smallest accepted R^2 of the geometric fit to the TV decay.
pub const TV_FIT_MIN_R2: Real = 0.99;

/// Per-level aggregate over replicas of one hierarchy sweep.
#[derive(Clone, Debug, Serialize)]
pub struct LevelRow {
    pub level: usize,
    /// Post-burn-in samples per replica.
    pub n: usize,
    pub replicas: usize,
    /// Mean absolute correction `E|Y_l|`, averaged over replicas.
    pub mean_abs_y: Real,
    /// Standard error of `mean_abs_y` over replicas (NaN for one replica).
    pub mean_abs_y_se: Real,
    /// Plain sample variance `V[Y_l]`, averaged over replicas.
    pub var_y: Real,
    pub var_y_se: Real,
    /// Fraction of steps with the pair synchronized (1 at level 0).
    pub sync_rate: Real,
    pub sync_rate_se: Real,
    /// Pooled signed correction mean (telescoping contribution).
    pub mean_y: Real,
    /// Batched-means asymptotic variance of the corrections, averaged over
    /// replicas.
    pub avar_y: Real,
    /// Pooled mean of the fine-chain quantity of interest.
    pub marginal_mean: Real,
    /// Batched-means standard error of `marginal_mean`, pooled over
    /// replicas.
    pub marginal_se: Real,
    pub accept_rate: Real,
    pub step_cost: Real,
}

fn replica_spread(values: &[Real]) -> (Real, Real) {
    let mean = estimator::pairwise_mean(values);
    let se = if values.len() >= 2 {
        (estimator::sample_var(values) / values.len() as Real).sqrt()
    } else {
        Real::NAN
    };
    (mean, se)
}

/// Asymptotic variance of a series by batched means, falling back to the
/// plain sample variance when the series is too short to batch.
fn asymptotic_var(series: &[Real]) -> Real {
    let m = estimator::default_batch_size(series.len());
    if m > 0 && series.len() / m >= 2 {
        estimator::batched_means_var(series, m).unwrap_or_else(|_| estimator::sample_var(series))
    } else {
        estimator::sample_var(series)
    }
}

/// Batched-means standard error of a series mean.
fn series_se(series: &[Real]) -> Real {
    (asymptotic_var(series) / series.len() as Real).sqrt()
}

fn aggregate_level(runs: &[ChainRun], stats: &[LevelStats]) -> LevelRow {
    let r = runs.len();
    let collect = |f: &dyn Fn(&LevelStats) -> Real| -> Vec<Real> { stats.iter().map(f).collect() };
    let (mean_abs_y, mean_abs_y_se) = replica_spread(&collect(&|s| s.mean_abs_y));
    let (var_y, var_y_se) = replica_spread(&collect(&|s| s.var_y_plain));
    let (sync_rate, sync_rate_se) = replica_spread(&collect(&|s| s.sync_rate));
    let (mean_y, _) = replica_spread(&collect(&|s| s.mean_y));
    let (avar_y, _) = replica_spread(&collect(&|s| s.var_y));
    let (marginal_mean, _) = replica_spread(&collect(&|s| s.mean_qoi_fine));

    // Replicas are independent, so the pooled mean's variance is the average
    // of the per-replica variances divided by the replica count.
    let var_of_mean: Real = runs
        .iter()
        .map(|run| asymptotic_var(&run.qoi_fine) / run.qoi_fine.len() as Real)
        .sum::<Real>()
        / (r * r) as Real;
    let accept_rate =
        estimator::pairwise_mean(&runs.iter().map(|r| r.accept_rate()).collect::<Vec<_>>());

    LevelRow {
        level: stats[0].level,
        n: stats[0].n,
        replicas: r,
        mean_abs_y,
        mean_abs_y_se,
        var_y,
        var_y_se,
        sync_rate,
        sync_rate_se,
        mean_y,
        avar_y,
        marginal_mean,
        marginal_se: var_of_mean.sqrt(),
        accept_rate,
        step_cost: stats[0].step_cost,
    }
}

fn level_stats_grid(runs: &[Vec<ChainRun>]) -> anyhow::Result<Vec<Vec<LevelStats>>> {
    runs.iter()
        .map(|rs| {
            rs.iter()
                .map(|r| estimator::level_stats(r).map_err(anyhow::Error::from))
                .collect()
        })
        .collect()
}

/// A fitted decay rate with a replica-spread confidence interval.
#[derive(Clone, Debug, Serialize)]
pub struct RateFit {
    /// Rate fitted on the replica-averaged values.
    pub rate: Real,
    /// Fitted level-0 amplitude.
    pub amplitude: Real,
    /// Normal 95% interval of the rate, centered on the mean of the
    /// per-replica fits.
    pub ci_lo: Real,
    pub ci_hi: Real,
}

fn rate_fit<F: Fn(&LevelStats) -> Real>(
    stats: &[Vec<LevelStats>],
    value: F,
    s: Real,
) -> anyhow::Result<RateFit> {
    let pooled: Vec<(usize, Real)> = stats
        .iter()
        .skip(1)
        .map(|level| {
            let vals: Vec<Real> = level.iter().map(&value).collect();
            (level[0].level, estimator::pairwise_mean(&vals))
        })
        .collect();
    let (amplitude, rate) = tuner::fit_rates(&pooled, s).context("fitting decay rate")?;

    let replicas = stats.first().map(|l| l.len()).unwrap_or(0);
    let mut per_replica = Vec::with_capacity(replicas);
    for r in 0..replicas {
        let pairs: Vec<(usize, Real)> = stats
            .iter()
            .skip(1)
            .map(|level| (level[r].level, value(&level[r])))
            .collect();
        if let Ok((_, fitted)) = tuner::fit_rates(&pairs, s) {
            per_replica.push(fitted);
        }
    }
    let (center, se) = replica_spread(&per_replica);
    Ok(RateFit {
        rate,
        amplitude,
        ci_lo: center - CI_Z * se,
        ci_hi: center + CI_Z * se,
    })
}

/// Result of the `rates` command.
#[derive(Clone, Debug, Serialize)]
pub struct RatesReport {
    pub problem: String,
    /// Refinement factor `s` between consecutive levels.
    pub refinement: Real,
    pub levels: Vec<LevelRow>,
    /// Decay rate of `E|Y_l|` over the coupled levels.
    pub alpha_w: RateFit,
    /// Decay rate of `V[Y_l]` over the coupled levels.
    pub beta: RateFit,
    /// Growth rate of the per-step cost.
    pub gamma: Real,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

const RATES_HEADER: &[&str] = &[
    "level",
    "mean_abs_y",
    "mean_abs_y_ci_lo",
    "mean_abs_y_ci_hi",
    "var_y",
    "var_y_ci_lo",
    "var_y_ci_hi",
    "sync_rate",
    "sync_rate_ci_lo",
    "sync_rate_ci_hi",
    "marginal_mean",
    "marginal_se",
    "mean_y",
    "avar_y",
    "accept_rate",
    "step_cost",
    "n",
];

fn rates_row(row: &LevelRow) -> Vec<String> {
    vec![
        cell(row.level),
        cell(row.mean_abs_y),
        cell(row.mean_abs_y - CI_Z * row.mean_abs_y_se),
        cell(row.mean_abs_y + CI_Z * row.mean_abs_y_se),
        cell(row.var_y),
        cell(row.var_y - CI_Z * row.var_y_se),
        cell(row.var_y + CI_Z * row.var_y_se),
        cell(row.sync_rate),
        cell(row.sync_rate - CI_Z * row.sync_rate_se),
        cell(row.sync_rate + CI_Z * row.sync_rate_se),
        cell(row.marginal_mean),
        cell(row.marginal_se),
        cell(row.mean_y),
        cell(row.avar_y),
        cell(row.accept_rate),
        cell(row.step_cost),
        cell(row.n),
    ]
}

/// Decay-rate study: replicated hierarchy sweeps at fixed per-level sample
/// counts, per-level aggregates with confidence intervals, and power-law
/// fits of the correction mean, correction variance, and step cost. Writes
/// `rates.csv` and `rates.json`.
pub fn cmd_rates(cfg: &RunConfig) -> anyhow::Result<RatesReport> {
    if cfg.replicas < 2 {
        return Err(ConfigError::NeedReplicas.into());
    }
    let problem = problems::make_problem(&cfg.problem, cfg.levels)?;
    let n_per_level = vec![cfg.samples_per_level; cfg.levels + 1];
    let mut opts = HierarchyOptions::new(cfg.master_seed);
    opts.replicas = cfg.replicas;
    opts.burnin = cfg.burnin_policy();
    let runs = sampler::run_hierarchy(problem.as_ref(), &n_per_level, &opts, None)?;

    let stats = level_stats_grid(&runs)?;
    let rows: Vec<LevelRow> = runs
        .iter()
        .zip(&stats)
        .map(|(rs, st)| aggregate_level(rs, st))
        .collect();
    let s = problem.hierarchy().refinement_factor as Real;
    let alpha_w = rate_fit(&stats, |st| st.mean_abs_y, s)?;
    let beta = rate_fit(&stats, |st| st.var_y_plain, s)?;
    let cost_pairs: Vec<(usize, Real)> = rows
        .iter()
        .skip(1)
        .map(|r| (r.level, r.step_cost))
        .collect();
    let gamma = -tuner::fit_rates(&cost_pairs, s)
        .context("fitting cost growth rate")?
        .1;

    let meta = Meta { config: cfg };
    let csv_path = cfg.output_path("rates.csv")?;
    let csv_rows: Vec<Vec<String>> = rows.iter().map(rates_row).collect();
    write_csv(&csv_path, &meta, &[], RATES_HEADER, &csv_rows)?;
    let json_path = cfg.output_path("rates.json")?;
    write_json(
        &json_path,
        &meta,
        json!({
            "problem": cfg.problem,
            "refinement": s,
            "alpha_w": alpha_w,
            "beta": beta,
            "gamma": gamma,
            "levels": rows,
        }),
    )?;

    Ok(RatesReport {
        problem: cfg.problem.clone(),
        refinement: s,
        levels: rows,
        alpha_w,
        beta,
        gamma,
        files: vec![csv_path, json_path],
    })
}

/// Result of the `run` command.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub estimate: Real,
    pub error: estimator::ErrorReport,
    /// Weak-error decay rate used for the bias model (1 when unfittable).
    pub alpha_w: Real,
    pub levels: Vec<LevelRow>,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

/// One hierarchy sweep at fixed per-level sample counts: multilevel estimate
/// plus its total-error decomposition against the configured tolerance.
/// Writes `levels.csv` and `estimate.json`, and per-level
/// `trajectory-l{level}.csv` files from the first replica when trajectories
/// are requested.
pub fn cmd_run(cfg: &RunConfig) -> anyhow::Result<RunReport> {
    let problem = problems::make_problem(&cfg.problem, cfg.levels)?;
    let n_per_level = vec![cfg.samples_per_level; cfg.levels + 1];
    let mut opts = HierarchyOptions::new(cfg.master_seed);
    opts.replicas = cfg.replicas;
    opts.burnin = cfg.burnin_policy();
    opts.keep_trajectories = cfg.emit_trajectories;
    let runs = sampler::run_hierarchy(problem.as_ref(), &n_per_level, &opts, None)?;

    let stats = level_stats_grid(&runs)?;
    let rows: Vec<LevelRow> = runs
        .iter()
        .zip(&stats)
        .map(|(rs, st)| aggregate_level(rs, st))
        .collect();
    let s = problem.hierarchy().refinement_factor as Real;

    let means: Vec<Real> = rows.iter().map(|r| r.mean_y).collect();
    let estimate = estimator::pairwise_sum(&means);
    let weak_pairs: Vec<(usize, Real)> = rows
        .iter()
        .skip(1)
        .filter(|r| r.mean_y.abs() > 0.0)
        .map(|r| (r.level, r.mean_y.abs()))
        .collect();
    let alpha_w = tuner::fit_rates(&weak_pairs, s)
        .ok()
        .map(|(_, rate)| rate)
        .filter(|rate| rate.is_finite() && *rate > 0.0)
        .unwrap_or(1.0);
    let sigma2: Vec<Real> = rows.iter().map(|r| r.avar_y).collect();
    let n_total: Vec<usize> = rows.iter().map(|r| r.n * r.replicas).collect();
    let error = estimator::error_report(
        &sigma2,
        &n_total,
        rows.last().map(|r| r.mean_y).unwrap_or(0.0),
        alpha_w,
        s,
        cfg.tol,
    )?;

    let meta = Meta { config: cfg };
    let csv_path = cfg.output_path("levels.csv")?;
    let header = [
        "level",
        "n",
        "mean_y",
        "mean_abs_y",
        "var_y",
        "avar_y",
        "marginal_mean",
        "marginal_se",
        "sync_rate",
        "accept_rate",
        "step_cost",
    ];
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                cell(r.level),
                cell(r.n * r.replicas),
                cell(r.mean_y),
                cell(r.mean_abs_y),
                cell(r.var_y),
                cell(r.avar_y),
                cell(r.marginal_mean),
                cell(r.marginal_se),
                cell(r.sync_rate),
                cell(r.accept_rate),
                cell(r.step_cost),
            ]
        })
        .collect();
    write_csv(&csv_path, &meta, &[], &header, &csv_rows)?;
    let json_path = cfg.output_path("estimate.json")?;
    write_json(
        &json_path,
        &meta,
        json!({
            "estimate": estimate,
            "error": error,
            "alpha_w": alpha_w,
            "levels": rows,
        }),
    )?;
    let mut files = vec![csv_path, json_path];

    if cfg.emit_trajectories {
        for level_runs in &runs {
            files.push(write_trajectory(cfg, &meta, &level_runs[0])?);
        }
    }

    Ok(RunReport {
        estimate,
        error,
        alpha_w,
        levels: rows,
        files,
    })
}

fn point_cells(point: &Point) -> impl Iterator<Item = String> + '_ {
    point.coords.iter().map(|c| cell(*c))
}

/// Writes the recorded states of one run (first replica) as
/// `trajectory-l{level}.csv`: `step, theta_*` at level 0 and
/// `step, coarse_*, fine_*` at coupled levels.
fn write_trajectory(cfg: &RunConfig, meta: &Meta, run: &ChainRun) -> anyhow::Result<PathBuf> {
    let fine = run
        .traj_fine
        .as_ref()
        .context("trajectories were not recorded")?;
    let dim = fine.first().map(|p| p.dim()).unwrap_or(1);

    let mut header: Vec<String> = vec!["step".to_string()];
    let mut rows: Vec<Vec<String>> = Vec::with_capacity(fine.len());
    if run.level == 0 {
        header.extend((0..dim).map(|d| format!("theta_{d}")));
        for (step, p) in fine.iter().enumerate() {
            let mut row = vec![cell(step)];
            row.extend(point_cells(p));
            rows.push(row);
        }
    } else {
        let coarse = run
            .traj_coarse
            .as_ref()
            .context("trajectories were not recorded")?;
        header.extend((0..dim).map(|d| format!("coarse_{d}")));
        header.extend((0..dim).map(|d| format!("fine_{d}")));
        for (step, (pc, pf)) in coarse.iter().zip(fine).enumerate() {
            let mut row = vec![cell(step)];
            row.extend(point_cells(pc));
            row.extend(point_cells(pf));
            rows.push(row);
        }
    }

    let path = cfg.output_path(&format!("trajectory-l{}.csv", run.level))?;
    let header_refs: Vec<&str> = header.iter().map(|h| h.as_str()).collect();
    let notes = [format!("level = {} replica = 0", run.level)];
    write_csv(&path, meta, &notes, &header_refs, &rows)?;
    Ok(path)
}

/// Result of the `continuation` command.
#[derive(Clone, Debug, Serialize)]
pub struct ContinuationOutcome {
    pub converged: bool,
    pub estimate: Real,
    /// Final total squared error estimate.
    pub te: Real,
    pub tol: Real,
    pub finest_level: usize,
    pub iterations: usize,
    pub total_work: Real,
    #[serde(skip)]
    pub history: Vec<IterationRecord>,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

/// Self-tuning continuation run down to the configured tolerance. Writes
/// `history.json` (one record per pass) and `estimate.json`; a run that
/// exhausts its iteration budget still writes both, with `converged: false`.
pub fn cmd_continuation(cfg: &RunConfig) -> anyhow::Result<ContinuationOutcome> {
    if cfg.tol >= cfg.tol0 {
        return Err(ConfigError::Field {
            field: "tol",
            message: format!(
                "target tolerance {} must lie below tol0 {}",
                cfg.tol, cfg.tol0
            ),
        }
        .into());
    }
    let problem = problems::make_problem(&cfg.problem, cfg.l_max)?;
    let mut driver = ContinuationConfig::new(cfg.tol, cfg.master_seed);
    driver.tol0 = cfg.tol0;
    driver.r1 = cfg.r1;
    driver.r2 = cfg.r2;
    driver.n_screen = cfg.samples_per_level;
    driver.l0 = cfg.l0;
    driver.l_max = cfg.l_max;

    let mut outcome = match tuner::continuation(problem.as_ref(), &driver) {
        Ok(report) => ContinuationOutcome {
            converged: true,
            estimate: report.estimate,
            te: report.te,
            tol: report.tol,
            finest_level: report.finest_level,
            iterations: report.history.len(),
            total_work: report.total_work,
            history: report.history,
            files: Vec::new(),
        },
        Err(TunerError::NoConvergence { tol, te, history }) => {
            let last = history.last();
            ContinuationOutcome {
                converged: false,
                estimate: last.map(|r| r.estimate).unwrap_or(Real::NAN),
                te,
                tol,
                finest_level: last.map(|r| r.finest_level).unwrap_or(0),
                iterations: history.len(),
                total_work: history.iter().map(|r| r.work).sum(),
                history,
                files: Vec::new(),
            }
        }
        Err(other) => return Err(other.into()),
    };

    let meta = Meta { config: cfg };
    let history_path = cfg.output_path("history.json")?;
    write_json(
        &history_path,
        &meta,
        json!({"history": outcome.history, "converged": outcome.converged}),
    )?;
    let estimate_path = cfg.output_path("estimate.json")?;
    write_json(
        &estimate_path,
        &meta,
        json!({
            "estimate": outcome.estimate,
            "te": outcome.te,
            "tol": outcome.tol,
            "converged": outcome.converged,
            "finest_level": outcome.finest_level,
            "iterations": outcome.iterations,
            "total_work": outcome.total_work,
        }),
    )?;
    outcome.files = vec![history_path, estimate_path];
    Ok(outcome)
}

/// One level's oracle verdict.
#[derive(Clone, Debug, Serialize)]
pub struct OracleLevelRow {
    pub level: usize,
    pub grid_n: usize,
    /// Worst total variation between a stationary marginal and its
    /// discretized target.
    pub marginal_tv: Real,
    pub gamma_ps: Real,
    pub argmax_k: usize,
    pub tv_fit_rate: Real,
    pub tv_fit_r_squared: Real,
    pub offdiag_mass: Real,
    pub mse_empirical: Real,
    pub mse_bound: Real,
    /// Worst entry difference between the marginalized pair matrix and the
    /// directly built single-level matrices.
    pub marginalization_err: Real,
    pub passed: bool,
}

/// Result of the `oracle-check` command.
#[derive(Clone, Debug, Serialize)]
pub struct OracleOutcome {
    pub grid_lo: Real,
    pub grid_hi: Real,
    pub grid_n: usize,
    pub levels: Vec<OracleLevelRow>,
    pub passed: bool,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

fn max_abs_diff(a: &[Real], b: &[Real]) -> Real {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, Real::max)
}

/// Finite-state verification of the coupled kernel on every level `1..=L`:
/// stationary marginals match the discretized targets, marginalizing the
/// pair matrix recovers the single-level matrices, the pseudo-spectral gap
/// is positive, total variation decays geometrically, and the simulated
/// mean-square error respects the theoretical bound. Writes `oracle.json`.
pub fn cmd_oracle_check(cfg: &RunConfig) -> anyhow::Result<OracleOutcome> {
    let gp = match cfg.problem.as_str() {
        "nested" => gaussian::nested_gaussians(cfg.levels),
        "shifting" => gaussian::shifting_gaussians(cfg.levels),
        other => {
            return Err(ConfigError::Unsupported {
                command: "oracle-check",
                problem: other.to_string(),
            }
            .into())
        }
    };
    let (lo, hi) = gp.support_bounds(ORACLE_SUPPORT_SIGMAS);
    let spec = GridSpec::new(lo, hi, ORACLE_GRID_N)?;

    let mut rows = Vec::with_capacity(cfg.levels);
    for level in 1..=cfg.levels {
        let kernel = oracle::build_grid_kernel(&gp, level, &spec)
            .with_context(|| format!("building the level {level} grid kernel"))?;

        let (tv_coarse, tv_fine) = kernel.marginal_tv();
        let marginal_tv = tv_coarse.max(tv_fine);

        let (marg_coarse, marg_fine) = oracle::marginalize(&kernel);
        let direct_coarse = oracle::imh_matrix(&kernel.target_coarse, &kernel.proposal);
        let direct_fine = oracle::imh_matrix(&kernel.target_fine, &kernel.proposal);
        let marginalization_err =
            max_abs_diff(&marg_coarse, &direct_coarse).max(max_abs_diff(&marg_fine, &direct_fine));

        let mode = kernel
            .target_fine
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap_or(0);
        let mut nu0 = vec![0.0; kernel.nu.len()];
        nu0[kernel.pair_index(mode, mode)] = 1.0;
        let tv = oracle::tv_convergence(&kernel.pair, &kernel.nu, &nu0, oracle::TV_STEPS);
        let fit = oracle::fit_geometric(&tv).unwrap_or(oracle::GeometricFit {
            rate: Real::NAN,
            r_squared: Real::NAN,
            points_used: 0,
        });

        let check = oracle::empirical_mse_check(
            &kernel,
            |i, j| kernel.qoi_fine[j] - kernel.qoi_coarse[i],
            ORACLE_MSE_SAMPLES,
            ORACLE_MSE_REPLICAS,
            cfg.master_seed,
        )?;

        let passed = marginal_tv < MARGINAL_TV_TOL
            && marginalization_err < MARGINALIZATION_TOL
            && check.gamma_ps > 0.0
            && check.passes
            && fit.r_squared > TV_FIT_MIN_R2;
        rows.push(OracleLevelRow {
            level,
            grid_n: kernel.n(),
            marginal_tv,
            gamma_ps: check.gamma_ps,
            argmax_k: check.argmax_k,
            tv_fit_rate: fit.rate,
            tv_fit_r_squared: fit.r_squared,
            offdiag_mass: kernel.stationary_offdiag_mass(),
            mse_empirical: check.empirical,
            mse_bound: check.bound,
            marginalization_err,
            passed,
        });
    }

    let passed = rows.iter().all(|r| r.passed);
    let meta = Meta { config: cfg };
    let json_path = cfg.output_path("oracle.json")?;
    write_json(
        &json_path,
        &meta,
        json!({
            "grid": {"lo": lo, "hi": hi, "n": ORACLE_GRID_N},
            "levels": rows,
            "passed": passed,
        }),
    )?;

    Ok(OracleOutcome {
        grid_lo: lo,
        grid_hi: hi,
        grid_n: ORACLE_GRID_N,
        levels: rows,
        passed,
        files: vec![json_path],
    })
}

/// One method's row in the comparison table.
#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub level: usize,
    /// `"coupled"` or `"subsampling"`.
    pub method: &'static str,
    pub marginal_mean: Real,
    /// Batched-means standard error of the marginal mean.
    pub marginal_se: Real,
    /// Synchronization rate. For the sub-sampling method this is its
    /// acceptance rate: an accepted step lands the fine chain exactly on the
    /// proposed coarse state.
    pub sync_rate: Real,
    pub accept_rate: Real,
    pub n: usize,
    /// Exact posterior mean of the quantity of interest, when known.
    pub exact_mean: Option<Real>,
    /// `|marginal_mean - exact_mean|` in units of `marginal_se`.
    pub deviation_se: Option<Real>,
}

/// Result of the `baseline-compare` command.
#[derive(Clone, Debug, Serialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    /// Sub-sampling gap per level used by the baseline.
    pub t_sub: Vec<usize>,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

fn compare_row(
    run: &ChainRun,
    method: &'static str,
    sync_rate: Real,
    exact: Option<Real>,
) -> CompareRow {
    let marginal_mean = estimator::pairwise_mean(&run.qoi_fine);
    let marginal_se = series_se(&run.qoi_fine);
    CompareRow {
        level: run.level,
        method,
        marginal_mean,
        marginal_se,
        sync_rate,
        accept_rate: run.accept_rate(),
        n: run.qoi_fine.len(),
        exact_mean: exact,
        deviation_se: exact.map(|e| (marginal_mean - e).abs() / marginal_se),
    }
}

/// Runs the coupled sampler and the sub-sampling baseline on the same
/// per-level budget and tabulates their marginal means against the exact
/// values. Writes `compare.csv`.
pub fn cmd_baseline_compare(cfg: &RunConfig) -> anyhow::Result<CompareReport> {
    if cfg.problem == "darcy" {
        return Err(ConfigError::Unsupported {
            command: "baseline-compare",
            problem: cfg.problem.clone(),
        }
        .into());
    }
    let problem = problems::make_problem(&cfg.problem, cfg.levels)?;
    let n_per_level = vec![cfg.samples_per_level; cfg.levels + 1];

    let mut opts = HierarchyOptions::new(cfg.master_seed);
    opts.burnin = cfg.burnin_policy();
    let coupled = sampler::run_hierarchy(problem.as_ref(), &n_per_level, &opts, None)?;
    let base = baseline::subsampling_baseline(problem.as_ref(), &n_per_level, cfg.master_seed)?;

    let mut rows = Vec::with_capacity(2 * (cfg.levels + 1));
    for level in 0..=cfg.levels {
        let exact = problem.exact_mean(level);
        let run = &coupled[level][0];
        rows.push(compare_row(run, "coupled", run.sync_rate(), exact));
        let brun = &base.runs[level];
        let sync = if level == 0 { 1.0 } else { brun.accept_rate() };
        rows.push(compare_row(brun, "subsampling", sync, exact));
    }

    let meta = Meta { config: cfg };
    let csv_path = cfg.output_path("compare.csv")?;
    let header = [
        "level",
        "method",
        "marginal_mean",
        "marginal_se",
        "sync_rate",
        "accept_rate",
        "n",
        "exact_mean",
        "deviation_se",
    ];
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                cell(r.level),
                r.method.to_string(),
                cell(r.marginal_mean),
                cell(r.marginal_se),
                cell(r.sync_rate),
                cell(r.accept_rate),
                cell(r.n),
                opt_cell(r.exact_mean),
                opt_cell(r.deviation_se),
            ]
        })
        .collect();
    let notes = [format!("subsampling gaps t_sub = {:?}", &base.t_sub[1..])];
    write_csv(&csv_path, &meta, &notes, &header, &csv_rows)?;

    Ok(CompareReport {
        rows,
        t_sub: base.t_sub,
        files: vec![csv_path],
    })
}
