//! One-dimensional Gaussian hierarchies with closed-form moments.
//!
//! Two families, both with identity quantity of interest, refinement factor
//! 2, and per-evaluation cost `2^l`:
//!
//! * nested: level target `N(1, 1 + 2^-l)`, independence proposal `N(1, 3)`.
//!   All levels share the mean, so successive targets coalesce from above
//!   and the telescoping corrections have zero expectation.
//! * shifting: level target `N(2^(2-l), 1)`, independence proposal `N(2, 3)`.
//!   The mean halves per level toward zero, giving a strict weak-error decay
//!   with known per-level expectations.
//!
//! Level densities are Lebesgue log-weights `-(x - m)^2 / (2 v)`,
//! deliberately unnormalized; acceptance ratios only see differences.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

use crate::model::{ConditionalProposal, Hierarchy, IndependentProposal, LevelTarget, Point};
use crate::problems::Problem;
use crate::Real;

/// Parameters of a one-dimensional Gaussian hierarchy.
#[derive(Clone, Debug)]
pub struct GaussianSpec {
    pub name: &'static str,
    /// Target mean per level.
    pub means: Vec<Real>,
    /// Target variance per level.
    pub vars: Vec<Real>,
    pub proposal_mean: Real,
    pub proposal_var: Real,
    /// Variance of the level-0 random-walk proposal.
    pub rwm_var: Real,
}

/// A Gaussian hierarchy problem built from a [`GaussianSpec`].
pub struct GaussianProblem {
    spec: GaussianSpec,
    hierarchy: Hierarchy,
}

/// Independence proposal `N(mean, var)` with normalized log-density.
pub fn normal_proposal(mean: Real, var: Real) -> IndependentProposal {
    let sd = var.sqrt();
    IndependentProposal {
        log_density: Arc::new(move |p: &Point| {
            let x = p.as_scalar();
            -0.5 * ((x - mean) * (x - mean) / var + (2.0 * std::f64::consts::PI * var).ln())
        }),
        sampler: Arc::new(move |rng: &mut dyn rand::RngCore| {
            let z: Real = StandardNormal.sample(rng);
            Point::scalar(mean + sd * z)
        }),
    }
}

/// Symmetric random-walk proposal `N(current, var)` in one dimension.
pub fn rwm_proposal(var: Real) -> ConditionalProposal {
    let sd = var.sqrt();
    ConditionalProposal {
        log_density: Arc::new(move |to: &Point, from: &Point| {
            let d = to.as_scalar() - from.as_scalar();
            -0.5 * (d * d / var + (2.0 * std::f64::consts::PI * var).ln())
        }),
        sampler: Arc::new(move |from: &Point, rng: &mut dyn rand::RngCore| {
            let z: Real = StandardNormal.sample(rng);
            Point::scalar(from.as_scalar() + sd * z)
        }),
        symmetric: true,
    }
}

impl GaussianProblem {
    /// Builds the hierarchy from a spec; one level per (mean, variance) pair.
    pub fn from_spec(spec: GaussianSpec) -> Self {
        assert_eq!(spec.means.len(), spec.vars.len());
        assert!(!spec.means.is_empty());
        let targets = spec
            .means
            .iter()
            .zip(&spec.vars)
            .enumerate()
            .map(|(level, (&m, &v))| LevelTarget {
                level,
                log_weight: Arc::new(move |p: &Point| {
                    let x = p.as_scalar();
                    -(x - m) * (x - m) / (2.0 * v)
                }),
                qoi: Arc::new(|p: &Point| p.as_scalar()),
                eval_cost: (2.0_f64).powi(level as i32),
            })
            .collect();
        let hierarchy = Hierarchy::new(targets, 2, None).expect("valid gaussian hierarchy");
        GaussianProblem { spec, hierarchy }
    }

    pub fn spec(&self) -> &GaussianSpec {
        &self.spec
    }

    /// Interval covering every level target and the proposal to `k_sigma`
    /// standard deviations; used to place quadrature grids.
    pub fn support_bounds(&self, k_sigma: Real) -> (Real, Real) {
        let mut lo = self.spec.proposal_mean - k_sigma * self.spec.proposal_var.sqrt();
        let mut hi = self.spec.proposal_mean + k_sigma * self.spec.proposal_var.sqrt();
        for (&m, &v) in self.spec.means.iter().zip(&self.spec.vars) {
            lo = lo.min(m - k_sigma * v.sqrt());
            hi = hi.max(m + k_sigma * v.sqrt());
        }
        (lo, hi)
    }

    /// Target mean at `level`.
    pub fn mean(&self, level: usize) -> Real {
        self.spec.means[level]
    }

    /// Target variance at `level`.
    pub fn var(&self, level: usize) -> Real {
        self.spec.vars[level]
    }
}

impl Problem for GaussianProblem {
    fn name(&self) -> &str {
        self.spec.name
    }

    fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    fn dim(&self) -> usize {
        1
    }

    fn level0_proposal(&self) -> ConditionalProposal {
        rwm_proposal(self.spec.rwm_var)
    }

    fn level0_init(&self) -> Point {
        Point::scalar(self.spec.proposal_mean)
    }

    fn proposal(&self, _level: usize, _warm: Option<&[Point]>) -> IndependentProposal {
        normal_proposal(self.spec.proposal_mean, self.spec.proposal_var)
    }

    fn exact_mean(&self, level: usize) -> Option<Real> {
        self.spec.means.get(level).copied()
    }
}

/// Nested family: `N(1, 1 + 2^-l)` for `l = 0..=l_max`, proposal `N(1, 3)`.
pub fn nested_gaussians(l_max: usize) -> GaussianProblem {
    let means = vec![1.0; l_max + 1];
    let vars = (0..=l_max)
        .map(|l| 1.0 + (2.0_f64).powi(-(l as i32)))
        .collect();
    GaussianProblem::from_spec(GaussianSpec {
        name: "nested",
        means,
        vars,
        proposal_mean: 1.0,
        proposal_var: 3.0,
        rwm_var: 1.0,
    })
}

/// Shifting family: `N(2^(2-l), 1)` for `l = 0..=l_max`, proposal `N(2, 3)`.
pub fn shifting_gaussians(l_max: usize) -> GaussianProblem {
    let means = (0..=l_max).map(|l| (2.0_f64).powi(2 - l as i32)).collect();
    let vars = vec![1.0; l_max + 1];
    GaussianProblem::from_spec(GaussianSpec {
        name: "shifting",
        means,
        vars,
        proposal_mean: 2.0,
        proposal_var: 3.0,
        rwm_var: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn nested_level_moments() {
        let p = nested_gaussians(6);
        assert_abs_diff_eq!(p.mean(0), 1.0);
        assert_abs_diff_eq!(p.var(0), 2.0);
        assert_abs_diff_eq!(p.var(3), 1.125);
        assert_abs_diff_eq!(p.var(6), 1.0 + 1.0 / 64.0);
        assert_eq!(p.exact_mean(5), Some(1.0));
    }

    #[test]
    fn shifting_level_moments() {
        let p = shifting_gaussians(6);
        assert_abs_diff_eq!(p.mean(0), 4.0);
        assert_abs_diff_eq!(p.mean(2), 1.0);
        assert_abs_diff_eq!(p.mean(6), 0.0625);
        assert_abs_diff_eq!(p.var(4), 1.0);
        assert_eq!(p.exact_mean(0), Some(4.0));
    }

    #[test]
    fn log_weight_closed_forms() {
        let nested = nested_gaussians(3);
        let h = nested.hierarchy();
        // Level 0 variance 2: -(3-1)^2 / 4 = -1.
        assert_abs_diff_eq!(
            h.log_target(0, &Point::scalar(3.0)).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(h.log_target(0, &Point::scalar(1.0)).unwrap(), 0.0);

        let shifting = shifting_gaussians(3);
        // Level 2 mean 1: weight vanishes at the mode.
        assert_abs_diff_eq!(
            shifting
                .hierarchy()
                .log_target(2, &Point::scalar(1.0))
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn eval_costs_double_per_level() {
        let p = nested_gaussians(4);
        let h = p.hierarchy();
        for l in 0..=4usize {
            assert_abs_diff_eq!(h.eval_cost(l).unwrap(), (2.0_f64).powi(l as i32));
        }
        assert_abs_diff_eq!(h.step_cost(3).unwrap(), 12.0);
    }

    #[test]
    fn proposal_sampler_matches_density() {
        // Kolmogorov-Smirnov distance between 1e5 sampler draws and the
        // claimed normal law stays under 0.01.
        let q = normal_proposal(1.0, 3.0);
        let mut rng = crate::rng::stream_rng(7, &[crate::rng::role::PROPOSAL]);
        let n = 100_000usize;
        let mut draws: Vec<Real> = (0..n).map(|_| (q.sampler)(&mut rng).as_scalar()).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let dist = Normal::new(1.0, 3.0_f64.sqrt()).unwrap();
        let mut ks: Real = 0.0;
        for (i, x) in draws.iter().enumerate() {
            let f = dist.cdf(*x);
            ks = ks.max((f - i as Real / n as Real).abs());
            ks = ks.max(((i + 1) as Real / n as Real - f).abs());
        }
        assert!(ks < 0.01, "KS distance {ks}");
    }

    #[test]
    fn proposal_density_is_normalized_normal() {
        let q = normal_proposal(2.0, 3.0);
        let dist = Normal::new(2.0, 3.0_f64.sqrt()).unwrap();
        use statrs::distribution::Continuous;
        for x in [-1.0, 0.0, 2.0, 4.5] {
            assert_abs_diff_eq!(
                (q.log_density)(&Point::scalar(x)),
                dist.ln_pdf(x),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn rwm_proposal_is_symmetric_in_displacement() {
        let q = rwm_proposal(1.0);
        let a = Point::scalar(0.3);
        let b = Point::scalar(-1.2);
        assert_abs_diff_eq!(
            (q.log_density)(&a, &b),
            (q.log_density)(&b, &a),
            epsilon = 1e-12
        );
        assert!(q.symmetric);
    }

    #[test]
    fn support_bounds_cover_all_levels() {
        let p = shifting_gaussians(6);
        let (lo, hi) = p.support_bounds(6.0);
        // Proposal N(2,3) dominates the right edge; target N(0.0625, 1) the left.
        assert!(lo <= 0.0625 - 6.0);
        assert!(hi >= 2.0 + 6.0 * 3.0_f64.sqrt());
    }
}
