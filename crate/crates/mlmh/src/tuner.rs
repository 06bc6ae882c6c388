//! Adaptive tuning: sample allocation, tolerance schedule, level selection,
//! rate fitting, complexity classification, and the continuation driver.
//!
//! The continuation driver runs the hierarchy through a decreasing sequence
//! of intermediate tolerances. Each pass refits the power-law models for weak
//! error, correction variance, and cost from the freshest runs, re-selects
//! the finest level, re-allocates samples, and stops once the estimated
//! total squared error is within the requested tolerance. Working through
//! intermediate tolerances lets cheap early passes pay for the model fits
//! that make the final, expensive pass close to optimally allocated.

use serde::Serialize;
use thiserror::Error;

use crate::estimator::{self, EstimatorError, LevelStats};
use crate::model::Point;
use crate::problems::Problem;
use crate::sampler::{self, BurninPolicy, ChainRun, HierarchyOptions, SamplerError};
use crate::Real;

/// Errors from tuning and continuation.
#[derive(Debug, Error)]
pub enum TunerError {
    #[error("empty input")]
    Empty,
    #[error("variance and cost lists must have equal nonzero length")]
    LengthMismatch,
    #[error("need tol > 0, got {0}")]
    BadTol(Real),
    #[error("need r1 >= r2 > 1 and 0 < tol < tol0, got tol0={tol0}, tol={tol}, r1={r1}, r2={r2}")]
    BadSchedule {
        tol0: Real,
        tol: Real,
        r1: Real,
        r2: Real,
    },
    #[error("need L_prev <= L_max, got {l_prev} > {l_max}")]
    BadLevelRange { l_prev: usize, l_max: usize },
    #[error(
        "no level up to {l_max} meets the bias constraint at tol {tol}; \
         smallest achievable tol is {min_tol}"
    )]
    Infeasible {
        tol: Real,
        l_max: usize,
        min_tol: Real,
    },
    #[error("rate fit needs at least two distinct levels with positive values")]
    FitUnderdetermined,
    #[error("rate fit values must be positive and finite")]
    FitNonPositive,
    #[error(
        "continuation did not reach tol {tol} within {} iterations (last te = {te})",
        history.len()
    )]
    NoConvergence {
        tol: Real,
        te: Real,
        history: Vec<IterationRecord>,
    },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// Fitted power-law models driving allocation and level selection: weak
/// error `C_w s^(-alpha_w l)`, correction variance `C_beta s^(-beta l)`, and
/// per-step cost `C_gamma s^(gamma l)`, plus the measured per-level
/// asymptotic variances.
#[derive(Clone, Debug, Serialize)]
pub struct TuningParams {
    pub c_w: Real,
    pub alpha_w: Real,
    pub c_beta: Real,
    pub beta: Real,
    pub c_gamma: Real,
    pub gamma: Real,
    /// Measured asymptotic variance per visited level.
    pub sigma2: Vec<Real>,
}

impl TuningParams {
    /// Variance at `level`: the measurement when available and positive,
    /// otherwise the fitted model.
    pub fn sigma2_at(&self, level: usize, s: Real) -> Real {
        match self.sigma2.get(level) {
            Some(&v) if v > 0.0 => v,
            _ => self.c_beta * s.powf(-self.beta * level as Real),
        }
    }

    /// Modeled per-step cost at `level`.
    pub fn cost_at(&self, level: usize, s: Real) -> Real {
        self.c_gamma * s.powf(self.gamma * level as Real)
    }

    /// Modeled absolute weak error contributed by levels beyond `level`.
    pub fn weak_error_at(&self, level: usize, s: Real) -> Real {
        self.c_w * s.powf(-self.alpha_w * level as Real)
    }
}

/// Optimal per-level sample counts before the integer ceiling:
/// `factor * 2 tol^-2 sqrt(sigma2_l / C_l) sum_j sqrt(sigma2_j C_j)`.
fn sample_sizes_scaled(
    sigma2: &[Real],
    cost: &[Real],
    tol: Real,
    factor: Real,
) -> Result<Vec<Real>, TunerError> {
    if sigma2.is_empty() || sigma2.len() != cost.len() {
        return Err(TunerError::LengthMismatch);
    }
    if !(tol > 0.0) {
        return Err(TunerError::BadTol(tol));
    }
    let cross: Vec<Real> = sigma2
        .iter()
        .zip(cost)
        .map(|(&v, &c)| (v * c).sqrt())
        .collect();
    let total = estimator::pairwise_sum(&cross);
    Ok(sigma2
        .iter()
        .zip(cost)
        .map(|(&v, &c)| factor * 2.0 / (tol * tol) * (v / c).sqrt() * total)
        .collect())
}

/// Real-valued allocation before the ceiling, for exact scale-law checks.
pub fn sample_sizes_real(
    sigma2: &[Real],
    cost: &[Real],
    tol: Real,
) -> Result<Vec<Real>, TunerError> {
    sample_sizes_scaled(sigma2, cost, tol, 1.0)
}

/// Work-optimal sample counts `N_l = ceil(2 tol^-2 sqrt(sigma2_l / C_l)
/// sum_j sqrt(sigma2_j C_j))`, floored at one sample per level.
pub fn sample_sizes(sigma2: &[Real], cost: &[Real], tol: Real) -> Result<Vec<usize>, TunerError> {
    Ok(sample_sizes_scaled(sigma2, cost, tol, 1.0)?
        .into_iter()
        .map(|n| (n.ceil() as usize).max(1))
        .collect())
}

/// Allocation with the extra `(L+1)` factor that makes the statistical error
/// target hold with the `2 (L+1) sum sigma2_l / N_l` bound.
pub fn sample_sizes_corrected(
    sigma2: &[Real],
    cost: &[Real],
    tol: Real,
) -> Result<Vec<usize>, TunerError> {
    let factor = sigma2.len() as Real;
    Ok(sample_sizes_scaled(sigma2, cost, tol, factor)?
        .into_iter()
        .map(|n| (n.ceil() as usize).max(1))
        .collect())
}

/// Decreasing tolerance sequence for the continuation driver.
#[derive(Clone, Debug, Serialize)]
pub struct Schedule {
    /// Tolerances for iterations `0..=i_e`.
    pub tolerances: Vec<Real>,
    /// Index of the first iteration whose tolerance is below the target.
    pub i_e: usize,
    pub tol0: Real,
    pub tol: Real,
    pub r1: Real,
    pub r2: Real,
}

impl Schedule {
    /// Tolerance at any iteration, continuing to shrink by `r2` past `i_e`.
    pub fn tol_at(&self, i: usize) -> Real {
        if i < self.tolerances.len() {
            self.tolerances[i]
        } else {
            self.tol * self.r2.powi(self.i_e as i32 - i as i32 - 1)
        }
    }
}

/// Builds the tolerance schedule: `i_E = floor((log(tol0) + log(r2) -
/// log(tol)) / log(r1))`, then `tol_i = r1^(i_E - i) tol / r2` before `i_E`
/// and `tol_i = r2^(i_E - i) tol / r2` from `i_E` on. Coarse early
/// tolerances shrink by the aggressive factor `r1`; once below the target
/// the schedule refines gently by `r2`, and `tol_(i_E - 1) >= tol >
/// tol_(i_E)` holds by construction.
pub fn tol_schedule(tol0: Real, tol: Real, r1: Real, r2: Real) -> Result<Schedule, TunerError> {
    if !(r1 >= r2 && r2 > 1.0 && tol > 0.0 && tol < tol0) {
        return Err(TunerError::BadSchedule { tol0, tol, r1, r2 });
    }
    let i_e = ((-tol.ln() + r2.ln() + tol0.ln()) / r1.ln())
        .floor()
        .max(0.0) as usize;
    let tolerances = (0..=i_e)
        .map(|i| r1.powi((i_e - i) as i32) * tol / r2)
        .collect();
    Ok(Schedule {
        tolerances,
        i_e,
        tol0,
        tol,
        r1,
        r2,
    })
}

/// Picks the finest level for tolerance `tol_i`: the cheapest
/// `L in [l_prev, l_max]` by the modeled cost
/// `2 tol_i^-2 * 2 (L+1) (sum_j sqrt(C_beta s^(-beta j) C_j))^2`
/// among those meeting the bias constraint
/// `C_w s^(-alpha_w L) <= tol_i / sqrt(2)`, by exhaustive search.
pub fn select_levels(
    l_prev: usize,
    l_max: usize,
    tol_i: Real,
    params: &TuningParams,
    s: Real,
) -> Result<usize, TunerError> {
    if l_prev > l_max {
        return Err(TunerError::BadLevelRange { l_prev, l_max });
    }
    if !(tol_i > 0.0) {
        return Err(TunerError::BadTol(tol_i));
    }
    let bias_ok = |l: usize| params.weak_error_at(l, s) <= tol_i / (2.0_f64).sqrt();
    let cost = |l: usize| {
        let terms: Vec<Real> = (0..=l)
            .map(|j| {
                (params.c_beta * s.powf(-params.beta * j as Real) * params.cost_at(j, s)).sqrt()
            })
            .collect();
        let sum = estimator::pairwise_sum(&terms);
        2.0 / (tol_i * tol_i) * 2.0 * (l + 1) as Real * sum * sum
    };
    let best = (l_prev..=l_max)
        .filter(|&l| bias_ok(l))
        .min_by(|&a, &b| cost(a).partial_cmp(&cost(b)).unwrap());
    best.ok_or_else(|| TunerError::Infeasible {
        tol: tol_i,
        l_max,
        min_tol: (2.0_f64).sqrt() * params.weak_error_at(l_max, s),
    })
}

/// Least-squares fit of `v_l = C s^(-rate l)` through `(level, value)` pairs
/// via log-linear regression; exact on exact power-law data.
pub fn fit_rates(pairs: &[(usize, Real)], s: Real) -> Result<(Real, Real), TunerError> {
    if pairs.iter().any(|&(_, v)| !(v.is_finite() && v > 0.0)) {
        return Err(TunerError::FitNonPositive);
    }
    let mut levels: Vec<usize> = pairs.iter().map(|&(l, _)| l).collect();
    levels.sort_unstable();
    levels.dedup();
    if levels.len() < 2 {
        return Err(TunerError::FitUnderdetermined);
    }
    let n = pairs.len() as Real;
    let xs: Vec<Real> = pairs.iter().map(|&(l, _)| l as Real * s.ln()).collect();
    let ys: Vec<Real> = pairs.iter().map(|&(_, v)| v.ln()).collect();
    let xbar = estimator::pairwise_sum(&xs) / n;
    let ybar = estimator::pairwise_sum(&ys) / n;
    let cov: Vec<Real> = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| (x - xbar) * (y - ybar))
        .collect();
    let var: Vec<Real> = xs.iter().map(|&x| (x - xbar) * (x - xbar)).collect();
    let slope = estimator::pairwise_sum(&cov) / estimator::pairwise_sum(&var);
    let intercept = ybar - slope * xbar;
    Ok((intercept.exp(), -slope))
}

/// Asymptotic cost regime of the multilevel estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Regime {
    /// Variance decays faster than cost grows: cost `tol^-2 |log tol|`.
    VarianceDominated,
    /// Balanced decay and growth: cost `tol^-2 |log tol|^3`.
    Balanced,
    /// Cost growth wins: cost `tol^(-2 - (gamma - beta)/alpha_w) |log tol|`.
    CostDominated,
}

/// Regime tag with the tolerance and log exponents of the cost bound
/// `tol^tol_exponent |log tol|^log_exponent`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RegimeReport {
    pub regime: Regime,
    pub tol_exponent: Real,
    pub log_exponent: u32,
}

/// Classifies the asymptotic complexity from the variance decay rate `beta`,
/// cost growth rate `gamma`, and weak rate `alpha_w`.
pub fn complexity_regime(beta: Real, gamma: Real, alpha_w: Real) -> RegimeReport {
    if (beta - gamma).abs() <= 1e-9 {
        RegimeReport {
            regime: Regime::Balanced,
            tol_exponent: -2.0,
            log_exponent: 3,
        }
    } else if beta > gamma {
        RegimeReport {
            regime: Regime::VarianceDominated,
            tol_exponent: -2.0,
            log_exponent: 1,
        }
    } else {
        RegimeReport {
            regime: Regime::CostDominated,
            tol_exponent: -2.0 - (gamma - beta) / alpha_w,
            log_exponent: 1,
        }
    }
}

/// Settings of the continuation driver.
#[derive(Clone, Debug, Serialize)]
pub struct ContinuationConfig {
    /// Target tolerance: the driver stops once the estimated total squared
    /// error is at most `tol^2`.
    pub tol: Real,
    pub tol0: Real,
    pub r1: Real,
    pub r2: Real,
    /// Screening samples per level.
    pub n_screen: usize,
    /// Screening hierarchy depth (levels `0..=l0`).
    pub l0: usize,
    pub l_max: usize,
    pub max_iterations: usize,
    /// Use the `(L+1)`-corrected allocation instead of the plain one.
    pub corrected_allocation: bool,
    pub master_seed: u64,
}

impl ContinuationConfig {
    pub fn new(tol: Real, master_seed: u64) -> Self {
        ContinuationConfig {
            tol,
            tol0: 0.5,
            r1: 2.0,
            r2: 1.1,
            n_screen: 1000,
            l0: 2,
            l_max: 10,
            max_iterations: 20,
            corrected_allocation: false,
            master_seed,
        }
    }
}

/// One continuation pass.
#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub tol_i: Real,
    pub finest_level: usize,
    pub n_per_level: Vec<usize>,
    pub params: TuningParams,
    pub estimate: Real,
    /// Statistical part of the total squared error estimate.
    pub statistical: Real,
    /// Modeled squared bias `2 (C_w s^(-alpha_w L))^2`.
    pub bias_sq: Real,
    /// Total squared error estimate.
    pub te: Real,
    /// Model evaluation work of this pass.
    pub work: Real,
}

/// Final result of a continuation run.
#[derive(Clone, Debug, Serialize)]
pub struct ContinuationReport {
    pub estimate: Real,
    pub tol: Real,
    pub statistical: Real,
    pub bias_sq: Real,
    pub te: Real,
    pub finest_level: usize,
    pub n_per_level: Vec<usize>,
    pub params: TuningParams,
    pub history: Vec<IterationRecord>,
    pub total_work: Real,
}

fn stats_of(runs: &[Vec<ChainRun>]) -> Result<Vec<LevelStats>, TunerError> {
    runs.iter()
        .map(|level_runs| estimator::level_stats(&level_runs[0]).map_err(TunerError::from))
        .collect()
}

/// Refits the three power laws from per-level statistics. Weak-error and
/// variance fits use coupled levels (`l >= 1`) only; pairs with nonpositive
/// values are dropped. A fit is also rejected when it comes out
/// non-decaying (rate <= 0): that happens when the measured values are pure
/// noise, as for the weak error of a hierarchy whose level means all agree,
/// and extrapolating a growing model would make every finest-level choice
/// look infeasible. Rejected fits leave the previous model in place, or the
/// neutral zero-amplitude model when there is none.
fn refit(stats: &[LevelStats], s: Real, prev: Option<&TuningParams>) -> TuningParams {
    let weak: Vec<(usize, Real)> = stats
        .iter()
        .filter(|st| st.level >= 1 && st.mean_y.abs() > 0.0)
        .map(|st| (st.level, st.mean_y.abs()))
        .collect();
    let var: Vec<(usize, Real)> = stats
        .iter()
        .filter(|st| st.level >= 1 && st.var_y > 0.0)
        .map(|st| (st.level, st.var_y))
        .collect();
    let cost: Vec<(usize, Real)> = stats
        .iter()
        .filter(|st| st.level >= 1)
        .map(|st| (st.level, st.step_cost))
        .collect();

    let decaying = |fit: Result<(Real, Real), TunerError>| {
        fit.ok()
            .filter(|&(c, rate)| c.is_finite() && c >= 0.0 && rate > 0.0)
    };
    let (c_w, alpha_w) = decaying(fit_rates(&weak, s))
        .or(prev.map(|p| (p.c_w, p.alpha_w)))
        .unwrap_or((0.0, 1.0));
    let (c_beta, beta) = decaying(fit_rates(&var, s))
        .or(prev.map(|p| (p.c_beta, p.beta)))
        .unwrap_or((0.0, 1.0));
    // Costs grow with the level, so their fitted rate is nonpositive.
    let (c_gamma, neg_gamma) = fit_rates(&cost, s)
        .ok()
        .filter(|&(c, rate)| c.is_finite() && c > 0.0 && rate <= 0.0)
        .or(prev.map(|p| (p.c_gamma, -p.gamma)))
        .unwrap_or((1.0, 0.0));

    TuningParams {
        c_w,
        alpha_w,
        c_beta,
        beta,
        c_gamma,
        gamma: -neg_gamma,
        sigma2: stats.iter().map(|st| st.var_y).collect(),
    }
}

/// Self-tuning continuation driver: screen, then repeatedly re-select the
/// finest level, re-allocate samples for the current intermediate tolerance,
/// rerun the hierarchy with fresh seeds, and refit the models, until the
/// estimated total squared error `te = 2 (L+1) sum_l sigma2_l / N_l +
/// 2 (C_w s^(-alpha_w L))^2` is at most `tol^2` at or past the schedule
/// index `i_E`.
pub fn continuation(
    problem: &dyn Problem,
    cfg: &ContinuationConfig,
) -> Result<ContinuationReport, TunerError> {
    let schedule = tol_schedule(cfg.tol0, cfg.tol, cfg.r1, cfg.r2)?;
    let s = problem.hierarchy().refinement_factor as Real;
    let h = problem.hierarchy();
    let l0 = cfg.l0.min(h.max_level());
    let l_max = cfg.l_max.min(h.max_level());
    let wants_warm = problem.wants_warm_proposals();

    // Screening pass: equal samples on levels 0..=l0 to seed the fits.
    let mut opts = HierarchyOptions::new(cfg.master_seed);
    opts.burnin = BurninPolicy::Default;
    opts.keep_trajectories = wants_warm;
    let screen_n = vec![cfg.n_screen; l0 + 1];
    let screen_runs = sampler::run_hierarchy(problem, &screen_n, &opts, None)?;
    let mut total_work: Real = screen_runs
        .iter()
        .flat_map(|rs| rs.iter().map(|r| r.work))
        .sum();
    let mut params = refit(&stats_of(&screen_runs)?, s, None);
    let mut warm: Option<Vec<Vec<Point>>> = wants_warm.then(|| {
        screen_runs
            .iter()
            .map(|rs| rs[0].traj_fine.clone().unwrap_or_default())
            .collect()
    });

    let mut l_prev = l0;
    let mut history: Vec<IterationRecord> = Vec::new();

    for i in 0..cfg.max_iterations {
        let tol_i = schedule.tol_at(i);
        let finest = select_levels(l_prev, l_max, tol_i, &params, s)?;
        l_prev = finest;

        let sigma2: Vec<Real> = (0..=finest).map(|l| params.sigma2_at(l, s)).collect();
        let costs: Vec<Real> = (0..=finest)
            .map(|l| h.step_cost(l))
            .collect::<Result<_, _>>()
            .map_err(SamplerError::from)?;
        let n_per_level = if cfg.corrected_allocation {
            sample_sizes_corrected(&sigma2, &costs, tol_i)?
        } else {
            sample_sizes(&sigma2, &costs, tol_i)?
        };

        let mut it_opts = HierarchyOptions::new(cfg.master_seed);
        it_opts.iteration = (i + 1) as u64;
        it_opts.keep_trajectories = wants_warm;
        let runs = sampler::run_hierarchy(problem, &n_per_level, &it_opts, warm.as_deref())?;
        let work: Real = runs.iter().flat_map(|rs| rs.iter().map(|r| r.work)).sum();
        total_work += work;

        let stats = stats_of(&runs)?;
        params = refit(&stats, s, Some(&params));
        if wants_warm {
            warm = Some(
                runs.iter()
                    .map(|rs| rs[0].traj_fine.clone().unwrap_or_default())
                    .collect(),
            );
        }

        let estimate = estimator::ml_estimate(&stats)?;
        let stat_terms: Vec<Real> = stats.iter().map(|st| st.var_y / st.n as Real).collect();
        let statistical = 2.0 * (finest + 1) as Real * estimator::pairwise_sum(&stat_terms);
        let bias = params.weak_error_at(finest, s);
        let bias_sq = 2.0 * bias * bias;
        let te = statistical + bias_sq;

        history.push(IterationRecord {
            iteration: i,
            tol_i,
            finest_level: finest,
            n_per_level: n_per_level.clone(),
            params: params.clone(),
            estimate,
            statistical,
            bias_sq,
            te,
            work,
        });

        if i >= schedule.i_e && te <= cfg.tol * cfg.tol {
            return Ok(ContinuationReport {
                estimate,
                tol: cfg.tol,
                statistical,
                bias_sq,
                te,
                finest_level: finest,
                n_per_level,
                params,
                history,
                total_work,
            });
        }
    }

    let te = history.last().map(|r| r.te).unwrap_or(Real::INFINITY);
    Err(TunerError::NoConvergence {
        tol: cfg.tol,
        te,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::gaussian::{shifting_gaussians, GaussianProblem, GaussianSpec};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn flat_params(c_w: Real, alpha_w: Real) -> TuningParams {
        TuningParams {
            c_w,
            alpha_w,
            c_beta: 1.0,
            beta: 1.0,
            c_gamma: 1.0,
            gamma: 1.0,
            sigma2: vec![],
        }
    }

    #[test]
    fn sample_sizes_worked_example() {
        let n = sample_sizes(&[1.0, 0.25], &[1.0, 2.0], 0.1).unwrap();
        assert_eq!(n, vec![342, 121]);
    }

    #[test]
    fn sample_sizes_single_level() {
        assert_eq!(sample_sizes(&[1.0], &[1.0], 1.0).unwrap(), vec![2]);
    }

    #[test]
    fn sample_sizes_zero_variance_floors_at_one() {
        let n = sample_sizes(&[1.0, 0.0], &[1.0, 2.0], 0.5).unwrap();
        assert_eq!(n[1], 1);
        assert!(n[0] >= 1);
    }

    #[test]
    fn sample_sizes_corrected_carries_level_count() {
        // Two levels: corrected counts are the plain pre-ceiling counts
        // scaled by (L+1) = 2.
        let plain = sample_sizes_real(&[1.0, 0.25], &[1.0, 2.0], 0.1).unwrap();
        let corr = sample_sizes_corrected(&[1.0, 0.25], &[1.0, 2.0], 0.1).unwrap();
        for (p, c) in plain.iter().zip(corr) {
            assert_eq!(c, (2.0 * p).ceil() as usize);
        }
    }

    #[test]
    fn sample_sizes_rejects_bad_input() {
        assert!(matches!(
            sample_sizes(&[], &[], 0.1),
            Err(TunerError::LengthMismatch)
        ));
        assert!(matches!(
            sample_sizes(&[1.0], &[1.0], 0.0),
            Err(TunerError::BadTol(_))
        ));
    }

    #[test]
    fn tol_schedule_worked_example() {
        let s = tol_schedule(0.5, 0.1, 2.0, 1.1).unwrap();
        assert_eq!(s.i_e, 2);
        assert_eq!(s.tolerances.len(), 3);
        assert_abs_diff_eq!(s.tolerances[0], 0.36364, epsilon = 1e-5);
        assert_abs_diff_eq!(s.tolerances[1], 0.18182, epsilon = 1e-5);
        assert_abs_diff_eq!(s.tolerances[2], 0.09091, epsilon = 1e-5);
        assert!(s.tolerances[1] >= 0.1 && 0.1 > s.tolerances[2]);
        // Past i_E the schedule keeps shrinking by r2.
        assert_abs_diff_eq!(s.tol_at(3), 0.09091 / 1.1, epsilon = 1e-5);
        assert_abs_diff_eq!(s.tol_at(2), s.tolerances[2]);
    }

    #[test]
    fn tol_schedule_near_target_start() {
        let s = tol_schedule(0.5, 0.45, 2.0, 1.1).unwrap();
        assert_eq!(s.i_e, 0);
        assert_abs_diff_eq!(s.tolerances[0], 0.45 / 1.1, epsilon = 1e-12);
    }

    #[test]
    fn tol_schedule_uniform_when_factors_equal() {
        let s = tol_schedule(1.0, 0.1, 1.5, 1.5).unwrap();
        for w in s.tolerances.windows(2) {
            assert_abs_diff_eq!(w[0] / w[1], 1.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn tol_schedule_rejects_bad_input() {
        assert!(tol_schedule(0.5, 0.6, 2.0, 1.1).is_err());
        assert!(tol_schedule(0.5, 0.1, 1.1, 2.0).is_err());
        assert!(tol_schedule(0.5, 0.1, 2.0, 1.0).is_err());
    }

    #[test]
    fn select_levels_worked_example() {
        // Constraint 4 * 2^-L <= 0.1/sqrt(2) first holds at L = 6.
        let p = flat_params(4.0, 1.0);
        let l = select_levels(0, 10, 0.1, &p, 2.0).unwrap();
        assert_eq!(l, 6);
    }

    #[test]
    fn select_levels_keeps_l_prev_when_feasible() {
        let p = flat_params(0.001, 1.0);
        assert_eq!(select_levels(3, 10, 0.5, &p, 2.0).unwrap(), 3);
    }

    #[test]
    fn select_levels_infeasible_reports_min_tol() {
        let p = flat_params(4.0, 1.0);
        match select_levels(0, 5, 0.001, &p, 2.0) {
            Err(TunerError::Infeasible { min_tol, l_max, .. }) => {
                assert_eq!(l_max, 5);
                assert_abs_diff_eq!(min_tol, (2.0_f64).sqrt() * 4.0 / 32.0, epsilon = 1e-12);
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn select_levels_rejects_bad_range() {
        let p = flat_params(1.0, 1.0);
        assert!(matches!(
            select_levels(4, 2, 0.1, &p, 2.0),
            Err(TunerError::BadLevelRange { .. })
        ));
    }

    #[test]
    fn fit_rates_exact_power_laws() {
        let s = 2.0;
        let pairs: Vec<(usize, Real)> = (1..=5)
            .map(|l| (l, 4.0 * (2.0_f64).powf(-1.5 * l as Real)))
            .collect();
        let (c, rate) = fit_rates(&pairs, s).unwrap();
        assert_abs_diff_eq!(c, 4.0, epsilon = 1e-10);
        assert_abs_diff_eq!(rate, 1.5, epsilon = 1e-10);

        let pairs: Vec<(usize, Real)> = (0..=6)
            .map(|l| (l, (2.0_f64).powf(-2.0 * l as Real)))
            .collect();
        let (c, rate) = fit_rates(&pairs, s).unwrap();
        assert_abs_diff_eq!(c, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(rate, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn fit_rates_constant_values() {
        let pairs = [(0, 3.0), (1, 3.0), (2, 3.0)];
        let (c, rate) = fit_rates(&pairs, 2.0).unwrap();
        assert_abs_diff_eq!(c, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rate, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn fit_rates_rejects_degenerate_input() {
        assert!(matches!(
            fit_rates(&[(1, 1.0)], 2.0),
            Err(TunerError::FitUnderdetermined)
        ));
        assert!(matches!(
            fit_rates(&[(1, 1.0), (1, 2.0)], 2.0),
            Err(TunerError::FitUnderdetermined)
        ));
        assert!(matches!(
            fit_rates(&[(1, 1.0), (2, 0.0)], 2.0),
            Err(TunerError::FitNonPositive)
        ));
    }

    #[test]
    fn complexity_regime_cases() {
        let r = complexity_regime(2.0, 1.0, 1.0);
        assert_eq!(r.regime, Regime::VarianceDominated);
        assert_abs_diff_eq!(r.tol_exponent, -2.0);
        assert_eq!(r.log_exponent, 1);

        let r = complexity_regime(1.0, 1.0, 1.0);
        assert_eq!(r.regime, Regime::Balanced);
        assert_eq!(r.log_exponent, 3);

        let r = complexity_regime(0.5, 1.0, 1.0);
        assert_eq!(r.regime, Regime::CostDominated);
        assert_abs_diff_eq!(r.tol_exponent, -2.5);
    }

    #[test]
    fn continuation_converges_on_shifting_hierarchy() {
        let p = shifting_gaussians(10);
        let cfg = ContinuationConfig::new(0.25, 4242);
        let report = continuation(&p, &cfg).unwrap();
        assert!(report.te <= cfg.tol * cfg.tol);
        assert!(!report.history.is_empty());
        // True mean at the finest levels approaches 0; a 0.25-tolerance run
        // should land within a few tolerances of it.
        assert!(
            report.estimate.abs() < 3.0 * cfg.tol,
            "estimate {}",
            report.estimate
        );
        assert!(report.total_work > 0.0);
        // Iterations pass through the schedule: at least i_E + 1 of them.
        let sched = tol_schedule(cfg.tol0, cfg.tol, cfg.r1, cfg.r2).unwrap();
        assert!(report.history.len() >= sched.i_e + 1);
        // Finest level never shrinks across iterations.
        for w in report.history.windows(2) {
            assert!(w[1].finest_level >= w[0].finest_level);
        }
    }

    #[test]
    fn continuation_degenerate_hierarchy_stays_coarse() {
        // All levels share one target: corrections vanish, the fitted weak
        // error collapses, and the driver stays at the screening depth.
        let p = GaussianProblem::from_spec(GaussianSpec {
            name: "degenerate",
            means: vec![1.0; 6],
            vars: vec![2.0; 6],
            proposal_mean: 1.0,
            proposal_var: 3.0,
            rwm_var: 1.0,
        });
        let cfg = ContinuationConfig::new(0.3, 7);
        let report = continuation(&p, &cfg).unwrap();
        assert_eq!(report.finest_level, cfg.l0);
        assert!(report.bias_sq <= 1e-6, "bias_sq {}", report.bias_sq);
    }

    #[test]
    fn continuation_nested_allocation_decreases_with_level() {
        let p = crate::problems::gaussian::nested_gaussians(10);
        let cfg = ContinuationConfig::new(0.07, 11);
        let report = continuation(&p, &cfg).unwrap();
        let n = &report.n_per_level;
        for w in n.windows(2) {
            assert!(
                w[1] <= w[0] + 1,
                "allocation should decrease with level: {n:?}"
            );
        }
    }

    proptest! {
        #[test]
        fn schedule_brackets_target(tol0 in 0.2..2.0f64, frac in 0.01..0.8f64,
                                    r1x in 0.0..1.5f64, r2 in 1.01..2.0f64) {
            let tol = tol0 * frac;
            let r1 = r2 + r1x;
            let s = tol_schedule(tol0, tol, r1, r2).unwrap();
            if s.i_e >= 1 {
                prop_assert!(s.tolerances[s.i_e - 1] >= tol);
            }
            prop_assert!(tol > s.tolerances[s.i_e] - 1e-12);
            for w in s.tolerances.windows(2) {
                prop_assert!(w[0] > w[1]);
            }
        }

        #[test]
        fn halving_tol_quadruples_allocation(v0 in 0.1..10.0f64, v1 in 0.1..10.0f64,
                                             c0 in 0.5..4.0f64, c1 in 0.5..16.0f64,
                                             tol in 0.01..1.0f64) {
            let base = sample_sizes_real(&[v0, v1], &[c0, c1], tol).unwrap();
            let half = sample_sizes_real(&[v0, v1], &[c0, c1], tol / 2.0).unwrap();
            for (b, h) in base.iter().zip(half) {
                prop_assert_eq!(4.0 * b, h);
            }
        }

        #[test]
        fn select_levels_respects_bounds(l_prev in 0usize..4, extra in 0usize..8,
                                         tol in 0.05..1.0f64,
                                         c_w in 0.01..4.0f64, alpha in 0.3..2.0f64) {
            let l_max = l_prev + extra;
            let p = flat_params(c_w, alpha);
            match select_levels(l_prev, l_max, tol, &p, 2.0) {
                Ok(l) => {
                    prop_assert!(l >= l_prev && l <= l_max);
                    prop_assert!(p.weak_error_at(l, 2.0) <= tol / 2.0_f64.sqrt());
                }
                Err(TunerError::Infeasible { min_tol, .. }) => {
                    prop_assert!(min_tol > tol);
                }
                Err(e) => prop_assert!(false, "unexpected error {e:?}"),
            }
        }

        #[test]
        fn fit_rates_exact_on_random_power_laws(c in 0.1..10.0f64, rate in -2.0..3.0f64) {
            let pairs: Vec<(usize, Real)> = (1..=6)
                .map(|l| (l, c * (2.0_f64).powf(-rate * l as Real)))
                .collect();
            let (c_fit, r_fit) = fit_rates(&pairs, 2.0).unwrap();
            prop_assert!((c_fit - c).abs() <= 1e-9 * c);
            prop_assert!((r_fit - rate).abs() <= 1e-9);
        }
    }
}
