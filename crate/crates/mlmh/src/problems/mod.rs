//! Ready-made inference problems with posterior hierarchies.
//!
//! A [`Problem`] bundles everything the drivers need: the level hierarchy,
//! the level-0 random-walk proposal and starting point, and an independence
//! proposal per coupled level (optionally rebuilt from states of the level
//! below).

use thiserror::Error;

use crate::model::{ConditionalProposal, Hierarchy, IndependentProposal, Point};
use crate::Real;

pub mod baseline;
pub mod darcy;
pub mod gaussian;
pub mod kde;

/// A fully specified inference problem.
pub trait Problem: Send + Sync {
    /// Short identifier ("nested", "shifting", "darcy").
    fn name(&self) -> &str;

    /// The posterior hierarchy.
    fn hierarchy(&self) -> &Hierarchy;

    /// Parameter dimension.
    fn dim(&self) -> usize;

    /// Random-walk proposal driving the level-0 chain.
    fn level0_proposal(&self) -> ConditionalProposal;

    /// Starting point of the level-0 chain.
    fn level0_init(&self) -> Point;

    /// Independence proposal for the coupled pair at `level >= 1`. `warm`,
    /// when given, holds states approximately distributed like the coarser
    /// target and may be used to adapt the proposal.
    fn proposal(&self, level: usize, warm: Option<&[Point]>) -> IndependentProposal;

    /// True when [`Problem::proposal`] improves with warm states; the
    /// hierarchy driver then records trajectories and threads them through.
    fn wants_warm_proposals(&self) -> bool {
        false
    }

    /// Exact posterior mean of the quantity of interest at `level`, when
    /// known in closed form.
    fn exact_mean(&self, level: usize) -> Option<Real>;
}

/// Problem construction errors.
#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown problem name {0:?} (expected nested, shifting, or darcy)")]
    UnknownName(String),
    #[error("maximum level {given} exceeds the limit {limit} for {name}")]
    LevelLimit {
        name: &'static str,
        given: usize,
        limit: usize,
    },
}

/// Builds a problem by name with levels `0..=l_max`.
pub fn make_problem(name: &str, l_max: usize) -> Result<Box<dyn Problem>, ProblemError> {
    match name {
        "nested" => Ok(Box::new(gaussian::nested_gaussians(l_max))),
        "shifting" => Ok(Box::new(gaussian::shifting_gaussians(l_max))),
        "darcy" => Ok(Box::new(darcy::DarcyProblem::new(l_max)?)),
        other => Err(ProblemError::UnknownName(other.to_string())),
    }
}
