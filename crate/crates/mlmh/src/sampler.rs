//! Chain drivers: burn-in, recording, seeding, and multi-level orchestration.
//!
//! Every chain draws from its own counter-derived random stream, so a run is
//! reproducible from one master seed regardless of thread scheduling, and
//! distinct (iteration, level, replica) combinations never share a stream.
//! Replicas run in parallel; levels run sequentially within a replica because
//! a level's independence proposal may be built from the previous level's
//! states.

use rayon::prelude::*;

use thiserror::Error;

use crate::kernel::{
    coupled_step, single_level_step_cached, CoupledState, KernelError, OutcomeKind,
};
use crate::model::{Hierarchy, IndependentProposal, ModelError, Point};
use crate::problems::Problem;
use crate::rng::{self, role};
use crate::Real;

/// Errors from chain drivers.
#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Estimator(#[from] crate::estimator::EstimatorError),
    #[error("a run needs at least one recorded sample")]
    EmptyRun,
    #[error("need one sample count per level 0..=L, got {0}")]
    BadLevelCounts(usize),
}

/// How many initial steps to discard.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BurninPolicy {
    /// `max(1000, n / 10)` where `n` is the recorded length.
    Default,
    Fixed(usize),
}

impl BurninPolicy {
    /// Resolves the policy for a run of `n` recorded samples.
    pub fn resolve(self, n: usize) -> usize {
        match self {
            BurninPolicy::Default => default_burnin(n),
            BurninPolicy::Fixed(b) => b,
        }
    }
}

/// Default burn-in length `max(1000, n / 10)`.
pub fn default_burnin(n: usize) -> usize {
    1000usize.max(n / 10)
}

/// Where a coupled pair starts.
#[derive(Clone, Debug)]
pub enum InitPolicy {
    /// Draw one point from the level's independence proposal and start both
    /// chains there (synchronized).
    SampleProposal,
    /// Explicit starting pair (coarse, fine).
    Fixed(Point, Point),
}

/// Per-run settings shared by the single-level and coupled drivers.
#[derive(Clone, Copy, Debug)]
pub struct RunSpec {
    /// Recorded (post-burn-in) sample count.
    pub n_samples: usize,
    pub burnin: BurninPolicy,
    /// Keep full state trajectories (needed to build warm proposals).
    pub keep_trajectories: bool,
}

impl RunSpec {
    pub fn new(n_samples: usize) -> Self {
        RunSpec {
            n_samples,
            burnin: BurninPolicy::Default,
            keep_trajectories: false,
        }
    }
}

/// Output of one chain run. Series are post-burn-in; `qoi_coarse`,
/// `outcomes`, and `sync` are empty for a level-0 run.
#[derive(Clone, Debug)]
pub struct ChainRun {
    pub level: usize,
    pub n_steps: usize,
    pub n_burnin: usize,
    /// Coarse-chain quantity of interest, evaluated at level `level - 1`.
    pub qoi_coarse: Vec<Real>,
    /// Fine-chain quantity of interest (the plain series at level 0).
    pub qoi_fine: Vec<Real>,
    /// Coupled-step outcome per recorded step.
    pub outcomes: Vec<OutcomeKind>,
    /// Acceptance flags of the (fine) chain per recorded step.
    pub accepted: Vec<bool>,
    /// Whether the pair sat on the diagonal after each recorded step.
    pub sync: Vec<bool>,
    /// Model evaluation cost of one step at this level.
    pub step_cost: Real,
    /// Total model evaluation work, burn-in included.
    pub work: Real,
    pub traj_coarse: Option<Vec<Point>>,
    pub traj_fine: Option<Vec<Point>>,
}

impl ChainRun {
    /// Fraction of recorded steps with both chains at the same point; 1 for
    /// a level-0 run.
    pub fn sync_rate(&self) -> Real {
        if self.sync.is_empty() {
            return 1.0;
        }
        self.sync.iter().filter(|s| **s).count() as Real / self.sync.len() as Real
    }

    /// Fraction of recorded steps that accepted (fine chain for a pair).
    pub fn accept_rate(&self) -> Real {
        if self.accepted.is_empty() {
            return 0.0;
        }
        self.accepted.iter().filter(|a| **a).count() as Real / self.accepted.len() as Real
    }
}

/// Fraction of recorded steps with the pair synchronized.
pub fn sync_rate(run: &ChainRun) -> Real {
    run.sync_rate()
}

/// Runs the level-0 chain with a conditional (random-walk) proposal from a
/// fixed starting point.
pub fn run_level0(
    problem: &dyn Problem,
    spec: &RunSpec,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<ChainRun, SamplerError> {
    if spec.n_samples == 0 {
        return Err(SamplerError::EmptyRun);
    }
    let h = problem.hierarchy();
    let target = h.target(0)?;
    let q = problem.level0_proposal();
    let n_burnin = spec.burnin.resolve(spec.n_samples);
    let total = spec.n_samples + n_burnin;

    let mut theta = problem.level0_init();
    let mut log_t = (target.log_weight)(&theta);
    let mut qoi = Vec::with_capacity(spec.n_samples);
    let mut accepted = Vec::with_capacity(spec.n_samples);
    let mut traj = spec
        .keep_trajectories
        .then(|| Vec::with_capacity(spec.n_samples));

    for step_idx in 0..total {
        let step = single_level_step_cached(target, &q, &theta, log_t, rng)?;
        theta = step.point;
        log_t = step.log_t;
        if step_idx >= n_burnin {
            qoi.push(h.qoi_eval(0, &theta)?);
            accepted.push(step.accepted);
            if let Some(t) = traj.as_mut() {
                t.push(theta.clone());
            }
        }
    }

    let step_cost = target.eval_cost;
    Ok(ChainRun {
        level: 0,
        n_steps: spec.n_samples,
        n_burnin,
        qoi_coarse: Vec::new(),
        qoi_fine: qoi,
        outcomes: Vec::new(),
        accepted,
        sync: Vec::new(),
        step_cost,
        work: total as Real * step_cost,
        traj_coarse: None,
        traj_fine: traj,
    })
}

/// Runs the coupled pair at `level >= 1` with a shared independence proposal.
pub fn run_coupled(
    h: &Hierarchy,
    level: usize,
    q: &IndependentProposal,
    init: &InitPolicy,
    spec: &RunSpec,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<ChainRun, SamplerError> {
    if spec.n_samples == 0 {
        return Err(SamplerError::EmptyRun);
    }
    let n_burnin = spec.burnin.resolve(spec.n_samples);
    let total = spec.n_samples + n_burnin;

    let mut state = match init {
        InitPolicy::SampleProposal => {
            let z0 = (q.sampler)(rng);
            CoupledState::diagonal(h, level, q, z0)?
        }
        InitPolicy::Fixed(c, f) => CoupledState::new(h, level, q, c.clone(), f.clone())?,
    };

    let mut qoi_coarse = Vec::with_capacity(spec.n_samples);
    let mut qoi_fine = Vec::with_capacity(spec.n_samples);
    let mut outcomes = Vec::with_capacity(spec.n_samples);
    let mut accepted = Vec::with_capacity(spec.n_samples);
    let mut sync = Vec::with_capacity(spec.n_samples);
    let mut traj_coarse = spec
        .keep_trajectories
        .then(|| Vec::with_capacity(spec.n_samples));
    let mut traj_fine = spec
        .keep_trajectories
        .then(|| Vec::with_capacity(spec.n_samples));

    for step_idx in 0..total {
        let (next, outcome) = coupled_step(h, level, q, &state, rng)?;
        state = next;
        if step_idx >= n_burnin {
            qoi_coarse.push(h.qoi_eval(level - 1, &state.theta_coarse)?);
            qoi_fine.push(h.qoi_eval(level, &state.theta_fine)?);
            accepted.push(matches!(
                outcome.kind,
                OutcomeKind::BothAccepted | OutcomeKind::FineOnly
            ));
            outcomes.push(outcome.kind);
            sync.push(state.synchronized());
            if let Some(t) = traj_coarse.as_mut() {
                t.push(state.theta_coarse.clone());
            }
            if let Some(t) = traj_fine.as_mut() {
                t.push(state.theta_fine.clone());
            }
        }
    }

    let step_cost = h.step_cost(level)?;
    Ok(ChainRun {
        level,
        n_steps: spec.n_samples,
        n_burnin,
        qoi_coarse,
        qoi_fine,
        outcomes,
        accepted,
        sync,
        step_cost,
        work: total as Real * step_cost,
        traj_coarse,
        traj_fine,
    })
}

/// Options for a full hierarchy sweep.
#[derive(Clone, Copy, Debug)]
pub struct HierarchyOptions {
    pub master_seed: u64,
    pub replicas: usize,
    pub burnin: BurninPolicy,
    /// Keep trajectories in the returned runs (warm-proposal states are
    /// collected internally regardless).
    pub keep_trajectories: bool,
    /// Continuation iteration index, folded into every chain seed so
    /// restarted chains draw fresh streams.
    pub iteration: u64,
}

impl HierarchyOptions {
    pub fn new(master_seed: u64) -> Self {
        HierarchyOptions {
            master_seed,
            replicas: 1,
            burnin: BurninPolicy::Default,
            keep_trajectories: false,
            iteration: 0,
        }
    }
}

/// Runs level 0 and all coupled levels `1..=L` for several independent
/// replicas. Returns `runs[level][replica]`. Replicas run in parallel with
/// pre-assigned seeds and ordered collection, so the result is independent of
/// thread scheduling. Within a replica, levels run in order and each coupled
/// level's proposal may be warm-started from the previous level's states.
///
/// `warm[level - 1]`, when provided, seeds the warm states for the first
/// coupled level's proposal (used by continuation restarts).
pub fn run_hierarchy(
    problem: &dyn Problem,
    n_per_level: &[usize],
    opts: &HierarchyOptions,
    warm_init: Option<&[Vec<Point>]>,
) -> Result<Vec<Vec<ChainRun>>, SamplerError> {
    if n_per_level.is_empty() {
        return Err(SamplerError::BadLevelCounts(0));
    }
    let levels = n_per_level.len();
    if levels > problem.hierarchy().max_level() + 1 {
        return Err(SamplerError::BadLevelCounts(levels));
    }
    let needs_warm = problem.wants_warm_proposals();

    let replica_runs: Vec<Result<Vec<ChainRun>, SamplerError>> = (0..opts.replicas.max(1))
        .into_par_iter()
        .map(|replica| {
            let mut runs = Vec::with_capacity(levels);
            let mut prev_states: Option<Vec<Point>> = warm_init.and_then(|w| w.first().cloned());
            for (level, &n) in n_per_level.iter().enumerate() {
                let labels = [opts.iteration, level as u64, replica as u64, role::CHAIN];
                let mut rng = rng::stream_rng(opts.master_seed, &labels);
                let keep = opts.keep_trajectories || (needs_warm && level + 1 < levels);
                let spec = RunSpec {
                    n_samples: n,
                    burnin: opts.burnin,
                    keep_trajectories: keep,
                };
                let run = if level == 0 {
                    run_level0(problem, &spec, &mut rng)?
                } else {
                    let warm_states = if needs_warm {
                        warm_init
                            .and_then(|w| w.get(level - 1))
                            .map(|v| v.as_slice())
                            .or(prev_states.as_deref())
                    } else {
                        None
                    };
                    let q = problem.proposal(level, warm_states);
                    run_coupled(
                        problem.hierarchy(),
                        level,
                        &q,
                        &InitPolicy::SampleProposal,
                        &spec,
                        &mut rng,
                    )?
                };
                prev_states = run.traj_fine.clone();
                let run = if opts.keep_trajectories {
                    run
                } else {
                    ChainRun {
                        traj_coarse: None,
                        traj_fine: None,
                        ..run
                    }
                };
                runs.push(run);
            }
            Ok(runs)
        })
        .collect();

    let mut per_replica = Vec::with_capacity(replica_runs.len());
    for r in replica_runs {
        per_replica.push(r?);
    }
    // Transpose to runs[level][replica].
    let mut by_level: Vec<Vec<ChainRun>> = (0..levels).map(|_| Vec::new()).collect();
    for replica in per_replica {
        for (level, run) in replica.into_iter().enumerate() {
            by_level[level].push(run);
        }
    }
    Ok(by_level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator;
    use crate::problems::gaussian::{nested_gaussians, shifting_gaussians};
    use approx::assert_abs_diff_eq;

    fn chain_rng(seed: u64, level: u64, replica: u64) -> rand_chacha::ChaCha12Rng {
        rng::stream_rng(seed, &[0, level, replica, role::CHAIN])
    }

    #[test]
    fn level0_acceptance_is_moderate() {
        // Random-walk steps of unit variance on a unit-variance target
        // accept most but not all moves; the chain neither freezes nor
        // degenerates into i.i.d. sampling.
        let p = shifting_gaussians(3);
        let mut rng = chain_rng(11, 0, 0);
        let run = run_level0(&p, &RunSpec::new(50_000), &mut rng).unwrap();
        let rate = run.accept_rate();
        assert!((0.5..0.9).contains(&rate), "acceptance rate {rate}");
    }

    #[test]
    fn level0_mean_matches_target() {
        let p = shifting_gaussians(3);
        let mut rng = chain_rng(12, 0, 0);
        let run = run_level0(&p, &RunSpec::new(50_000), &mut rng).unwrap();
        let mean = estimator::pairwise_mean(&run.qoi_fine);
        // E[theta] under the level-0 target is 4.
        assert_abs_diff_eq!(mean, 4.0, epsilon = 0.1);
    }

    #[test]
    fn runs_are_reproducible_from_seed() {
        let p = nested_gaussians(4);
        let spec = RunSpec::new(2_000);
        let mut a = chain_rng(77, 2, 0);
        let mut b = chain_rng(77, 2, 0);
        let q = p.proposal(2, None);
        let ra = run_coupled(
            p.hierarchy(),
            2,
            &q,
            &InitPolicy::SampleProposal,
            &spec,
            &mut a,
        )
        .unwrap();
        let rb = run_coupled(
            p.hierarchy(),
            2,
            &q,
            &InitPolicy::SampleProposal,
            &spec,
            &mut b,
        )
        .unwrap();
        assert_eq!(ra.qoi_fine, rb.qoi_fine);
        assert_eq!(ra.qoi_coarse, rb.qoi_coarse);
        assert_eq!(ra.outcomes, rb.outcomes);

        let mut c = chain_rng(78, 2, 0);
        let rc = run_coupled(
            p.hierarchy(),
            2,
            &q,
            &InitPolicy::SampleProposal,
            &spec,
            &mut c,
        )
        .unwrap();
        assert_ne!(ra.qoi_fine, rc.qoi_fine);
    }

    #[test]
    fn sync_rate_high_on_deep_nested_level() {
        // Adjacent nested targets at level 6 differ by a variance gap of
        // 2^-6, so the pair almost always moves together.
        let p = nested_gaussians(6);
        let q = p.proposal(6, None);
        let mut rng = chain_rng(13, 6, 0);
        let run = run_coupled(
            p.hierarchy(),
            6,
            &q,
            &InitPolicy::SampleProposal,
            &RunSpec::new(20_000),
            &mut rng,
        )
        .unwrap();
        assert!(run.sync_rate() >= 0.95, "sync rate {}", run.sync_rate());
        assert_eq!(sync_rate(&run), run.sync_rate());
    }

    #[test]
    fn sync_rate_increases_with_level() {
        // Desynchronization probability decays as the targets coalesce.
        let p = nested_gaussians(6);
        let mut rates = Vec::new();
        for level in 1..=6usize {
            let q = p.proposal(level, None);
            let mut rng = chain_rng(14, level as u64, 0);
            let run = run_coupled(
                p.hierarchy(),
                level,
                &q,
                &InitPolicy::SampleProposal,
                &RunSpec::new(20_000),
                &mut rng,
            )
            .unwrap();
            rates.push(run.sync_rate());
        }
        assert!(
            rates[5] > rates[0],
            "sync rates should grow with level: {rates:?}"
        );
        for w in rates.windows(2) {
            assert!(w[1] >= w[0] - 0.03, "non-monotone beyond noise: {rates:?}");
        }
    }

    #[test]
    fn work_accounting_is_exact() {
        let p = nested_gaussians(3);
        let spec = RunSpec {
            n_samples: 1,
            burnin: BurninPolicy::Fixed(4),
            keep_trajectories: false,
        };
        let q = p.proposal(3, None);
        let mut rng = chain_rng(15, 3, 0);
        let run = run_coupled(
            p.hierarchy(),
            3,
            &q,
            &InitPolicy::SampleProposal,
            &spec,
            &mut rng,
        )
        .unwrap();
        // Step cost at level 3 is 2^3 + 2^2 = 12; five total steps.
        assert_abs_diff_eq!(run.step_cost, 12.0);
        assert_abs_diff_eq!(run.work, 5.0 * 12.0);
        assert_eq!(run.qoi_fine.len(), 1);

        let mut rng0 = chain_rng(15, 0, 0);
        let run0 = run_level0(
            &p,
            &RunSpec {
                n_samples: 10,
                burnin: BurninPolicy::Fixed(0),
                keep_trajectories: false,
            },
            &mut rng0,
        )
        .unwrap();
        assert_abs_diff_eq!(run0.work, 10.0);
    }

    #[test]
    fn default_burnin_policy() {
        assert_eq!(default_burnin(10), 1000);
        assert_eq!(default_burnin(50_000), 5000);
        assert_eq!(BurninPolicy::Default.resolve(200_000), 20_000);
        assert_eq!(BurninPolicy::Fixed(7).resolve(200_000), 7);
    }

    #[test]
    fn hierarchy_run_shape_and_determinism() {
        let p = nested_gaussians(3);
        let n = [400usize, 300, 200, 100];
        let opts = HierarchyOptions {
            master_seed: 99,
            replicas: 3,
            burnin: BurninPolicy::Fixed(50),
            keep_trajectories: false,
            iteration: 0,
        };
        let a = run_hierarchy(&p, &n, &opts, None).unwrap();
        let b = run_hierarchy(&p, &n, &opts, None).unwrap();
        assert_eq!(a.len(), 4);
        for (level, runs) in a.iter().enumerate() {
            assert_eq!(runs.len(), 3);
            for (replica, run) in runs.iter().enumerate() {
                assert_eq!(run.level, level);
                assert_eq!(run.n_steps, n[level]);
                assert_eq!(run.qoi_fine, b[level][replica].qoi_fine);
            }
        }
        // Distinct replicas see distinct streams.
        assert_ne!(a[1][0].qoi_fine, a[1][1].qoi_fine);
        // A different continuation iteration reseeds every chain.
        let opts2 = HierarchyOptions {
            iteration: 1,
            ..opts
        };
        let c = run_hierarchy(&p, &n, &opts2, None).unwrap();
        assert_ne!(a[0][0].qoi_fine, c[0][0].qoi_fine);
    }

    #[test]
    fn empty_run_rejected() {
        let p = nested_gaussians(2);
        let mut rng = chain_rng(1, 0, 0);
        assert!(matches!(
            run_level0(&p, &RunSpec::new(0), &mut rng),
            Err(SamplerError::EmptyRun)
        ));
    }
}
