//! Posterior hierarchies, quantities of interest, and proposal distributions.
//!
//! All densities are log-densities relative to one reference measure fixed
//! per problem (Lebesgue for the 1-D Gaussian benchmarks, the prior for the
//! Darcy inverse problem). Targets are unnormalized: [`Hierarchy::log_target`]
//! returns the negative potential, and nothing downstream ever needs the
//! normalizing constants.

use std::sync::Arc;

use rand::RngCore;
use thiserror::Error;

use crate::Real;

/// A point in the parameter space (finite-dimensional).
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub coords: Vec<Real>,
}

impl Point {
    pub fn new(coords: Vec<Real>) -> Self {
        Point { coords }
    }

    /// A one-dimensional point.
    pub fn scalar(x: Real) -> Self {
        Point { coords: vec![x] }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// The single coordinate of a 1-D point.
    ///
    /// # Panics
    /// Panics if the point is not one-dimensional.
    pub fn as_scalar(&self) -> Real {
        assert_eq!(self.coords.len(), 1, "point is not 1-D");
        self.coords[0]
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|c| c.is_finite())
    }
}

/// Log-density (or other scalar field) evaluated at a point.
pub type DensityFn = Arc<dyn Fn(&Point) -> Real + Send + Sync>;
/// Draws a point from a distribution.
pub type PointSampler = Arc<dyn Fn(&mut dyn RngCore) -> Point + Send + Sync>;
/// Conditional log-density `log q(from, to)`.
pub type CondDensityFn = Arc<dyn Fn(&Point, &Point) -> Real + Send + Sync>;
/// Draws the next point given the current one.
pub type CondSampler = Arc<dyn Fn(&Point, &mut dyn RngCore) -> Point + Send + Sync>;

/// One level of the posterior hierarchy.
///
/// `log_weight` is the log of the unnormalized posterior density with respect
/// to the problem's reference measure (the negative potential). `eval_cost`
/// is the abstract work of one density evaluation at this level.
#[derive(Clone)]
pub struct LevelTarget {
    pub level: usize,
    pub log_weight: DensityFn,
    pub qoi: DensityFn,
    pub eval_cost: Real,
}

/// The full posterior hierarchy for one problem.
#[derive(Clone)]
pub struct Hierarchy {
    pub targets: Vec<LevelTarget>,
    /// Refinement factor `s` between consecutive discretization levels.
    pub refinement_factor: u32,
    /// Samples the reference (prior) measure, when that measure is a
    /// probability measure. `None` for Lebesgue-reference problems.
    pub reference_sampler: Option<PointSampler>,
}

/// Errors raised by model-level lookups and evaluations.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("level {level} out of range (hierarchy has levels 0..={max})")]
    LevelOutOfRange { level: usize, max: usize },
    #[error("point contains non-finite coordinates")]
    NonFinitePoint,
    #[error("hierarchy is empty")]
    EmptyHierarchy,
    #[error("hierarchy levels are not contiguous from 0 (found {found} at index {index})")]
    NonContiguousLevels { index: usize, found: usize },
    #[error(
        "eval_cost must be positive and non-decreasing in the level (violated at level {level})"
    )]
    BadCost { level: usize },
    #[error("refinement factor must be >= 2 (got {0})")]
    BadRefinement(u32),
}

impl Hierarchy {
    /// Validates and builds a hierarchy.
    pub fn new(
        targets: Vec<LevelTarget>,
        refinement_factor: u32,
        reference_sampler: Option<PointSampler>,
    ) -> Result<Self, ModelError> {
        if targets.is_empty() {
            return Err(ModelError::EmptyHierarchy);
        }
        if refinement_factor < 2 {
            return Err(ModelError::BadRefinement(refinement_factor));
        }
        let mut prev_cost = 0.0;
        for (index, t) in targets.iter().enumerate() {
            if t.level != index {
                return Err(ModelError::NonContiguousLevels {
                    index,
                    found: t.level,
                });
            }
            if !(t.eval_cost > 0.0) || t.eval_cost < prev_cost {
                return Err(ModelError::BadCost { level: index });
            }
            prev_cost = t.eval_cost;
        }
        Ok(Hierarchy {
            targets,
            refinement_factor,
            reference_sampler,
        })
    }

    pub fn max_level(&self) -> usize {
        self.targets.len() - 1
    }

    pub fn target(&self, level: usize) -> Result<&LevelTarget, ModelError> {
        self.targets.get(level).ok_or(ModelError::LevelOutOfRange {
            level,
            max: self.max_level(),
        })
    }

    /// Log of the unnormalized posterior density at `level`, w.r.t. the
    /// problem's reference measure.
    pub fn log_target(&self, level: usize, theta: &Point) -> Result<Real, ModelError> {
        if !theta.is_finite() {
            return Err(ModelError::NonFinitePoint);
        }
        Ok((self.target(level)?.log_weight)(theta))
    }

    /// Quantity of interest at `level`.
    pub fn qoi_eval(&self, level: usize, theta: &Point) -> Result<Real, ModelError> {
        if !theta.is_finite() {
            return Err(ModelError::NonFinitePoint);
        }
        Ok((self.target(level)?.qoi)(theta))
    }

    /// Work of one density evaluation at `level`.
    pub fn eval_cost(&self, level: usize) -> Result<Real, ModelError> {
        Ok(self.target(level)?.eval_cost)
    }

    /// Work of one sampler step at `level`: one fresh evaluation per target
    /// involved (two for a coupled step, one at level 0).
    pub fn step_cost(&self, level: usize) -> Result<Real, ModelError> {
        let own = self.eval_cost(level)?;
        if level == 0 {
            Ok(own)
        } else {
            Ok(own + self.eval_cost(level - 1)?)
        }
    }
}

/// An independence proposal: samples and log-density do not depend on the
/// current state. The log-density is w.r.t. the same reference measure as
/// the level targets.
#[derive(Clone)]
pub struct IndependentProposal {
    pub log_density: DensityFn,
    pub sampler: PointSampler,
}

/// A conditional proposal `Q(from, .)`, used by the level-0 chain.
#[derive(Clone)]
pub struct ConditionalProposal {
    pub log_density: CondDensityFn,
    pub sampler: CondSampler,
    /// When set, `log_density(a, b) = log_density(b, a)` and the MH ratio
    /// drops the proposal terms.
    pub symmetric: bool,
}

/// Result of the heavier-tails diagnostic for an independence proposal.
#[derive(Clone, Copy, Debug)]
pub struct TailCheck {
    /// Empirical max of `log_target - log_proposal` over the probe draws.
    pub max_log_ratio: Real,
    pub threshold: Real,
    /// True when the max exceeds the threshold, indicating the proposal's
    /// tails may be lighter than the target's (the chain would lose uniform
    /// ergodicity).
    pub exceeded: bool,
}

/// Probes `n` points and reports the empirical maximum of
/// `log_target - log_proposal`. Half the probes are plain proposal draws;
/// the other half are pairs stretched threefold apart (`a + 3(b - a)`), so a
/// proposal much narrower than the target is still caught even though its
/// own draws never reach the problem region. A large maximum suggests the
/// essential infimum of proposal/target is (near) zero, which breaks uniform
/// ergodicity; this cannot be verified exactly, so the check is a heuristic
/// warning, not a guarantee.
pub fn tail_ratio_check(
    target: &LevelTarget,
    proposal: &IndependentProposal,
    n: usize,
    threshold: Real,
    rng: &mut dyn RngCore,
) -> TailCheck {
    let mut max_log_ratio = Real::NEG_INFINITY;
    let mut probe = |z: &Point| {
        let ratio = (target.log_weight)(z) - (proposal.log_density)(z);
        if ratio > max_log_ratio {
            max_log_ratio = ratio;
        }
    };
    for _ in 0..n / 2 {
        let z = (proposal.sampler)(rng);
        probe(&z);
    }
    for _ in 0..n - n / 2 {
        let a = (proposal.sampler)(rng);
        let b = (proposal.sampler)(rng);
        let stretched = Point::new(
            a.coords
                .iter()
                .zip(&b.coords)
                .map(|(x, y)| x + 3.0 * (y - x))
                .collect(),
        );
        probe(&stretched);
    }
    TailCheck {
        max_log_ratio,
        threshold,
        exceeded: max_log_ratio > threshold,
    }
}
