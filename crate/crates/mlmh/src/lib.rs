//! Multilevel Markov chain Monte Carlo with coupled independent
//! Metropolis-Hastings chains.
//!
//! The estimator targets a posterior expectation through a telescoping sum
//! over a hierarchy of increasingly accurate (and expensive) posterior
//! approximations. At every level `l >= 1` a pair of chains (one for the
//! level-`l` posterior, one for level `l-1`) advances with a *shared*
//! independence proposal and a *shared* acceptance uniform, so the two chains
//! coincide most of the time and the level correction
//! `Y_l = QoI_l(theta_fine) - QoI_{l-1}(theta_coarse)` has small variance.
//!
//! Crate layout:
//! - [`model`]: hierarchies of level targets, proposals, reference measures.
//! - [`kernel`]: the single-level MH step and the coupled two-chain step.
//! - [`sampler`]: chain drivers with deterministic seeding and cost metering.
//! - [`estimator`]: level statistics, batched means, IACT, total-error test.
//! - [`tuner`]: sample allocation, tolerance schedule, level selection, and
//!   the self-tuning continuation driver.
//! - [`oracle`]: finite-state (grid) discretizations of the coupled kernel
//!   used to verify marginal correctness, ergodicity, and MSE bounds
//!   numerically.
//! - [`problems`]: built-in benchmark problems (two 1-D Gaussian families and
//!   a four-parameter Darcy flow inverse problem) plus a sub-sampling
//!   baseline for comparison.
//!
//! The pure numeric layer ([`scalar::Scalar`]-generic functions in
//! [`kernel`], [`estimator`], [`tuner`], and [`oracle::mse_bound`]) works for
//! `f32` and `f64`; samplers, linear algebra, and the PDE solver are fixed to
//! [`Real`].

pub mod estimator;
pub mod kernel;
pub mod model;
pub mod oracle;
pub mod problems;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tuner;

/// Concrete scalar type used by samplers, solvers, and oracles.
pub type Real = f64;

pub use model::{Hierarchy, IndependentProposal, LevelTarget, Point};
pub use sampler::ChainRun;
