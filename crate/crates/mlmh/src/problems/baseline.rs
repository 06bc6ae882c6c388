//! Sub-sampling multilevel MCMC baseline for comparison runs.
//!
//! Instead of a shared independence proposal, the fine chain at level `l`
//! proposes states of the level `l-1` chain taken `t_l` steps apart, with
//! acceptance ratio `pi_l(z) pi_(l-1)(theta) / (pi_l(theta) pi_(l-1)(z))`.
//! The sub-sampling gap `t_l` is the coarse chain's integrated
//! autocorrelation time, rounded up and capped at 5. Because the proposals
//! are an autocorrelated stream rather than independent draws, the invariant
//! law of the fine chain is biased whenever consecutive targets differ
//! appreciably; the comparison runs measure exactly that failure against the
//! coupled sampler.
//!
//! Levels are built bottom-up. The gap `t_l` is computed once, from a fixed
//! initial window of the coarse series. When a level later needs more coarse
//! states than recorded, the cascade below is rerun longer with the same
//! seeds and gaps; identical streams make each rerun an exact
//! prefix-extension, so previously computed gaps stay valid.

use crate::estimator::{self, LevelStats};
use crate::problems::Problem;
use crate::rng::{self, role};
use crate::sampler::{default_burnin, BurninPolicy, ChainRun, RunSpec, SamplerError};
use crate::Real;

/// Sub-sampling gap from an integrated autocorrelation time: `ceil(iact)`
/// clamped to `1..=5`.
pub fn subsample_rate(iact: Real) -> usize {
    (iact.ceil() as usize).clamp(1, 5)
}

/// Output of a baseline run.
#[derive(Clone, Debug)]
pub struct BaselineReport {
    /// Per-level runs; `qoi_coarse[n]` is the quantity of interest of the
    /// n-th proposed coarse state, `qoi_fine[n]` the fine chain's.
    pub runs: Vec<ChainRun>,
    /// Sub-sampling gap per level (index 0 unused, kept at 1).
    pub t_sub: Vec<usize>,
    /// Telescoping estimate from the per-level series.
    pub estimate: Real,
    pub stats: Vec<LevelStats>,
}

/// Runs the sub-sampling baseline on levels `0..=L` with the requested
/// per-level sample counts. Seeds derive from `master_seed` exactly like the
/// coupled driver's.
pub fn subsampling_baseline(
    problem: &dyn Problem,
    n_per_level: &[usize],
    master_seed: u64,
) -> Result<BaselineReport, SamplerError> {
    if n_per_level.is_empty() || n_per_level.contains(&0) {
        return Err(SamplerError::EmptyRun);
    }
    let levels = n_per_level.len();
    if levels > problem.hierarchy().max_level() + 1 {
        return Err(SamplerError::BadLevelCounts(levels));
    }

    let mut builder = Cascade {
        problem,
        n_requested: n_per_level,
        master_seed,
        t_sub: vec![1usize; levels],
        runs: Vec::with_capacity(levels),
    };

    builder.ensure_length(0, n_per_level[0])?;
    for level in 1..levels {
        // Gap from the coarse chain's fixed initial window; extensions never
        // change this window, so the value is stable.
        let coarse_series = &builder.runs[level - 1].qoi_fine;
        let window = n_per_level[level - 1].min(coarse_series.len());
        builder.t_sub[level] = subsample_rate(estimator::iact(&coarse_series[..window]));
        builder.ensure_length(level, n_per_level[level])?;
    }

    let mut runs = builder.runs;
    for (run, &n) in runs.iter_mut().zip(n_per_level) {
        run.qoi_fine.truncate(n);
        run.qoi_coarse.truncate(n);
        run.accepted.truncate(n);
        run.n_steps = run.qoi_fine.len();
        run.work = compute_work(run);
        run.traj_fine = None;
        run.traj_coarse = None;
    }

    let stats: Vec<LevelStats> = runs
        .iter()
        .map(estimator::level_stats)
        .collect::<Result<_, _>>()?;
    let estimate = estimator::ml_estimate(&stats)?;
    Ok(BaselineReport {
        runs,
        t_sub: builder.t_sub,
        estimate,
        stats,
    })
}

fn compute_work(run: &ChainRun) -> Real {
    (run.n_steps + run.n_burnin) as Real * run.step_cost
}

struct Cascade<'a> {
    problem: &'a dyn Problem,
    n_requested: &'a [usize],
    master_seed: u64,
    t_sub: Vec<usize>,
    runs: Vec<ChainRun>,
}

impl Cascade<'_> {
    /// Guarantees the level `l` chain has at least `len` recorded samples,
    /// rerunning it (and transitively its coarse chains) with the same seeds
    /// and gaps when it is missing or too short.
    fn ensure_length(&mut self, level: usize, len: usize) -> Result<(), SamplerError> {
        if let Some(run) = self.runs.get(level) {
            if run.qoi_fine.len() >= len {
                return Ok(());
            }
        }
        if level == 0 {
            let mut rng0 = rng::stream_rng(self.master_seed, &[0, 0, 0, role::CHAIN]);
            let spec = RunSpec {
                n_samples: len,
                // Burn-in frozen from the requested length so longer reruns
                // keep identical recorded prefixes.
                burnin: BurninPolicy::Fixed(default_burnin(self.n_requested[0])),
                keep_trajectories: true,
            };
            let run = crate::sampler::run_level0(self.problem, &spec, &mut rng0)?;
            self.set_run(0, run);
            return Ok(());
        }

        let gap = self.t_sub[level];
        self.ensure_length(level - 1, len * gap)?;
        let run = self.run_subsampled(level, len, gap)?;
        self.set_run(level, run);
        Ok(())
    }

    fn set_run(&mut self, level: usize, run: ChainRun) {
        if level < self.runs.len() {
            self.runs[level] = run;
        } else {
            debug_assert_eq!(level, self.runs.len());
            self.runs.push(run);
        }
    }

    /// One fine chain at `level`, proposing every `gap`-th coarse state.
    fn run_subsampled(&self, level: usize, n: usize, gap: usize) -> Result<ChainRun, SamplerError> {
        let h = self.problem.hierarchy();
        let coarse = &self.runs[level - 1];
        let coarse_states = coarse
            .traj_fine
            .as_ref()
            .expect("cascade keeps trajectories");
        debug_assert!(coarse_states.len() >= n * gap);

        let fine_target = h.target(level)?;
        let coarse_target = h.target(level - 1)?;
        let mut rng = rng::stream_rng(self.master_seed, &[0, level as u64, 0, role::CHAIN]);

        let mut theta = coarse_states[0].clone();
        let mut log_f_cur = (fine_target.log_weight)(&theta);
        let mut log_c_cur = (coarse_target.log_weight)(&theta);

        let mut qoi_fine = Vec::with_capacity(n);
        let mut qoi_coarse = Vec::with_capacity(n);
        let mut accepted = Vec::with_capacity(n);
        let mut traj = Vec::with_capacity(n);

        for step in 0..n {
            let z = &coarse_states[step * gap];
            let log_f_z = (fine_target.log_weight)(z);
            let log_c_z = (coarse_target.log_weight)(z);
            let log_ratio = (log_f_z - log_f_cur) + (log_c_cur - log_c_z);
            let alpha = log_ratio.min(0.0).exp();
            let u: Real = rand::Rng::gen(&mut rng);
            let acc = u <= alpha;
            if acc {
                theta = z.clone();
                log_f_cur = log_f_z;
                log_c_cur = log_c_z;
            }
            qoi_fine.push(h.qoi_eval(level, &theta)?);
            qoi_coarse.push(coarse.qoi_fine[step * gap]);
            accepted.push(acc);
            traj.push(theta.clone());
        }

        let step_cost = h.step_cost(level)?;
        Ok(ChainRun {
            level,
            n_steps: n,
            n_burnin: 0,
            qoi_coarse,
            qoi_fine,
            outcomes: Vec::new(),
            accepted,
            sync: Vec::new(),
            step_cost,
            work: n as Real * step_cost,
            traj_coarse: None,
            traj_fine: Some(traj),
        })
    }
}
