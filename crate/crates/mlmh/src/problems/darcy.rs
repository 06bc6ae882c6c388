//! Bayesian inversion of a steady Darcy flow on the unit square.
//!
//! The forward model solves `-div(kappa(x, theta) grad u) = 1` with `u = 0`
//! on the faces `x1 = 0` and `x1 = 1` and no-flux conditions on the other
//! two, by a cell-centered finite-volume scheme with harmonic-mean face
//! permeabilities on a `16 * 2^l` square grid. The log-permeability is a
//! four-term Fourier expansion in `x1` with standard normal prior
//! coefficients. Observations are the pressure at a 9 x 9 interior grid with
//! independent Gaussian noise; the quantity of interest is the mean pressure
//! over the domain.
//!
//! Level densities are posterior log-weights with respect to the prior:
//! `-Phi_l(theta) = -||y - F_l(theta)||^2 / (2 sigma^2)`. Proposal densities
//! are divided by the prior density so that everything downstream shares the
//! prior as reference measure.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::model::{ConditionalProposal, Hierarchy, IndependentProposal, LevelTarget, Point};
use crate::problems::kde::{self, log_standard_normal};
use crate::problems::{Problem, ProblemError};
use crate::rng::{self, role};
use crate::Real;

/// Cells per side at level 0.
pub const BASE_CELLS: usize = 16;
/// Finest level the solver accepts (256 cells per side).
pub const MAX_SOLVE_LEVEL: usize = 4;
/// Parameter dimension of the log-permeability expansion.
pub const DIM: usize = 4;
/// Observation noise standard deviation (about 1% of the signal).
pub const NOISE_STD: Real = 0.004;
/// Coefficients used to generate the synthetic data.
pub const TRUE_THETA: [Real; 4] = [0.8, -0.6, 0.4, -0.2];
/// Fixed seed of the synthetic observation noise; independent of run seeds
/// so every run inverts the same data.
pub const DATA_SEED: u64 = 0xDA7A_5EED;
/// Standard deviation of the level-0 random-walk proposal, per coordinate.
pub const RWM_STD: Real = 0.05;
/// Prior weight of the adaptive mixture proposal.
pub const KDE_PRIOR_WEIGHT: Real = 0.1;

const OBS_PER_SIDE: usize = 9;
const N_OBS: usize = OBS_PER_SIDE * OBS_PER_SIDE;

/// Errors from the forward solver.
#[derive(Debug, Error)]
pub enum DarcyError {
    #[error("level {0} exceeds the solver cap {MAX_SOLVE_LEVEL}")]
    LevelTooFine(usize),
    #[error("theta must have {DIM} coordinates, got {0}")]
    BadDimension(usize),
    #[error(
        "conjugate gradient stalled at level {level}: relative residual {residual:.3e} \
         after {iterations} iterations"
    )]
    SolverStalled {
        level: usize,
        residual: Real,
        iterations: usize,
    },
}

/// Log-permeability field evaluated at `x1`.
pub fn log_kappa(theta: &[Real], x1: Real) -> Real {
    use std::f64::consts::PI;
    theta[0] * (PI * x1).cos()
        + theta[1] / 2.0 * (PI * x1).sin()
        + theta[2] / 3.0 * (2.0 * PI * x1).cos()
        + theta[3] / 4.0 * (2.0 * PI * x1).sin()
}

/// Result of one forward solve.
#[derive(Clone, Debug)]
pub struct DarcySolution {
    /// Cell-centered pressure, row-major with `x1` fastest (`u[i + m j]`).
    pub u: Vec<Real>,
    /// Cells per side.
    pub cells: usize,
    /// Pressure at the 9 x 9 interior observation grid.
    pub observations: Vec<Real>,
    /// Mean pressure over the domain (midpoint quadrature).
    pub qoi: Real,
}

/// Solves the Darcy problem at `level` for the given coefficients.
pub fn darcy_solve(level: usize, theta: &Point) -> Result<DarcySolution, DarcyError> {
    if level > MAX_SOLVE_LEVEL {
        return Err(DarcyError::LevelTooFine(level));
    }
    if theta.dim() != DIM {
        return Err(DarcyError::BadDimension(theta.dim()));
    }
    let m = BASE_CELLS << level;
    let h = 1.0 / m as Real;

    // kappa depends on x1 only: one value per cell column, one per face.
    let kappa_cell: Vec<Real> = (0..m)
        .map(|i| log_kappa(&theta.coords, (i as Real + 0.5) * h).exp())
        .collect();
    // tx[i] couples cell i-1 and i in the x1 direction; tx[0] and tx[m] are
    // the Dirichlet faces with a half-cell distance (coefficient 2 kappa).
    let mut tx = vec![0.0; m + 1];
    tx[0] = 2.0 * log_kappa(&theta.coords, 0.0).exp();
    tx[m] = 2.0 * log_kappa(&theta.coords, 1.0).exp();
    for i in 1..m {
        let (a, b) = (kappa_cell[i - 1], kappa_cell[i]);
        tx[i] = 2.0 * a * b / (a + b);
    }
    // Vertical faces between rows share the column's kappa value; the top
    // and bottom boundaries are no-flux and contribute nothing.
    let ty = &kappa_cell;

    let n = m * m;
    let mut diag = vec![0.0; n];
    for j in 0..m {
        for i in 0..m {
            let mut d = tx[i] + tx[i + 1];
            if j > 0 {
                d += ty[i];
            }
            if j < m - 1 {
                d += ty[i];
            }
            diag[i + m * j] = d;
        }
    }

    let apply = |u: &[Real], out: &mut [Real]| {
        for j in 0..m {
            let row = m * j;
            for i in 0..m {
                let idx = row + i;
                let mut v = diag[idx] * u[idx];
                if i > 0 {
                    v -= tx[i] * u[idx - 1];
                }
                if i < m - 1 {
                    v -= tx[i + 1] * u[idx + 1];
                }
                if j > 0 {
                    v -= ty[i] * u[idx - m];
                }
                if j < m - 1 {
                    v -= ty[i] * u[idx + m];
                }
                out[idx] = v;
            }
        }
    };

    let b = vec![h * h; n];
    let u = jacobi_pcg(level, &apply, &diag, &b)?;

    let observations = observe(&u, m);
    let qoi = u.iter().sum::<Real>() * h * h;
    Ok(DarcySolution {
        u,
        cells: m,
        observations,
        qoi,
    })
}

/// Jacobi-preconditioned conjugate gradient, relative residual 1e-10,
/// at most 1e5 iterations.
fn jacobi_pcg(
    level: usize,
    apply: &dyn Fn(&[Real], &mut [Real]),
    diag: &[Real],
    b: &[Real],
) -> Result<Vec<Real>, DarcyError> {
    const TOL: Real = 1e-10;
    const MAX_ITERS: usize = 100_000;

    let n = b.len();
    let norm_b = b.iter().map(|v| v * v).sum::<Real>().sqrt();
    let mut u = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<Real> = r.iter().zip(diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut rz: Real = r.iter().zip(&z).map(|(a, c)| a * c).sum();
    let mut ap = vec![0.0; n];

    for iteration in 0..MAX_ITERS {
        apply(&p, &mut ap);
        let pap: Real = p.iter().zip(&ap).map(|(a, c)| a * c).sum();
        let alpha = rz / pap;
        for i in 0..n {
            u[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let norm_r = r.iter().map(|v| v * v).sum::<Real>().sqrt();
        if norm_r <= TOL * norm_b {
            return Ok(u);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_next: Real = r.iter().zip(&z).map(|(a, c)| a * c).sum();
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        if iteration + 1 == MAX_ITERS {
            return Err(DarcyError::SolverStalled {
                level,
                residual: norm_r / norm_b,
                iterations: MAX_ITERS,
            });
        }
    }
    unreachable!("loop returns or errors before falling through")
}

/// Bilinear interpolation of the cell-centered field at the 9 x 9 interior
/// observation points `(a/10, b/10)`, `a, b = 1..=9`, ordered with the `x1`
/// index fastest.
fn observe(u: &[Real], m: usize) -> Vec<Real> {
    let h = 1.0 / m as Real;
    let mut out = Vec::with_capacity(N_OBS);
    for b in 1..=OBS_PER_SIDE {
        for a in 1..=OBS_PER_SIDE {
            let px = a as Real / 10.0;
            let py = b as Real / 10.0;
            out.push(bilinear(u, m, h, px, py));
        }
    }
    out
}

fn bilinear(u: &[Real], m: usize, h: Real, px: Real, py: Real) -> Real {
    let gx = (px / h - 0.5).clamp(0.0, (m - 1) as Real);
    let gy = (py / h - 0.5).clamp(0.0, (m - 1) as Real);
    let i0 = (gx.floor() as usize).min(m - 2);
    let j0 = (gy.floor() as usize).min(m - 2);
    let wx = gx - i0 as Real;
    let wy = gy - j0 as Real;
    let at = |i: usize, j: usize| u[i + m * j];
    (1.0 - wx) * (1.0 - wy) * at(i0, j0)
        + wx * (1.0 - wy) * at(i0 + 1, j0)
        + (1.0 - wx) * wy * at(i0, j0 + 1)
        + wx * wy * at(i0 + 1, j0 + 1)
}

#[derive(Clone, Copy)]
struct CachedEval {
    potential: Real,
    qoi: Real,
}

/// Small exact-match cache so the log-weight and quantity-of-interest
/// closures of one level share a single forward solve per visited state.
struct SolveCache {
    level: usize,
    data: Arc<Vec<Real>>,
    entries: Mutex<VecDeque<(Vec<Real>, CachedEval)>>,
}

impl SolveCache {
    fn eval(&self, theta: &Point) -> CachedEval {
        {
            let entries = self.entries.lock().unwrap();
            if let Some((_, v)) = entries.iter().find(|(k, _)| k == &theta.coords) {
                return *v;
            }
        }
        let value = match darcy_solve(self.level, theta) {
            Ok(sol) => {
                let misfit: Real = sol
                    .observations
                    .iter()
                    .zip(self.data.iter())
                    .map(|(f, y)| (y - f) * (y - f))
                    .sum();
                CachedEval {
                    potential: misfit / (2.0 * NOISE_STD * NOISE_STD),
                    qoi: sol.qoi,
                }
            }
            // A failed solve poisons the state with zero posterior weight;
            // the kernel surfaces it as a non-finite-density error.
            Err(_) => CachedEval {
                potential: Real::INFINITY,
                qoi: Real::NAN,
            },
        };
        let mut entries = self.entries.lock().unwrap();
        entries.push_front((theta.coords.clone(), value));
        entries.truncate(16);
        value
    }
}

/// The Darcy inverse problem over levels `0..=l_max` (`l_max <= 3`), with
/// synthetic data generated one level above the finest.
pub struct DarcyProblem {
    hierarchy: Hierarchy,
    data: Arc<Vec<Real>>,
    l_max: usize,
}

impl DarcyProblem {
    pub fn new(l_max: usize) -> Result<Self, ProblemError> {
        if l_max + 1 > MAX_SOLVE_LEVEL {
            return Err(ProblemError::LevelLimit {
                name: "darcy",
                given: l_max,
                limit: MAX_SOLVE_LEVEL - 1,
            });
        }
        let data = Arc::new(synthetic_data(l_max + 1));

        let targets = (0..=l_max)
            .map(|level| {
                let cache = Arc::new(SolveCache {
                    level,
                    data: data.clone(),
                    entries: Mutex::new(VecDeque::new()),
                });
                let w_cache = cache.clone();
                let q_cache = cache;
                let cells = (BASE_CELLS << level) as Real;
                LevelTarget {
                    level,
                    log_weight: Arc::new(move |p: &Point| -w_cache.eval(p).potential),
                    qoi: Arc::new(move |p: &Point| q_cache.eval(p).qoi),
                    eval_cost: cells * cells,
                }
            })
            .collect();

        let prior_sampler: crate::model::PointSampler = Arc::new(|rng: &mut dyn rand::RngCore| {
            Point::new((0..DIM).map(|_| StandardNormal.sample(rng)).collect())
        });
        let hierarchy =
            Hierarchy::new(targets, 2, Some(prior_sampler)).expect("valid darcy hierarchy");
        Ok(DarcyProblem {
            hierarchy,
            data,
            l_max,
        })
    }

    /// The synthetic observations inverted by every run.
    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }
}

/// Observations of the true coefficients at `level`, plus seeded noise.
fn synthetic_data(level: usize) -> Vec<Real> {
    let sol = darcy_solve(level, &Point::new(TRUE_THETA.to_vec()))
        .expect("synthetic data solve converges");
    let mut rng = rng::stream_rng(DATA_SEED, &[role::DATA]);
    sol.observations
        .iter()
        .map(|f| {
            let e: Real = StandardNormal.sample(&mut rng);
            f + NOISE_STD * e
        })
        .collect()
}

impl Problem for DarcyProblem {
    fn name(&self) -> &str {
        "darcy"
    }

    fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    fn dim(&self) -> usize {
        DIM
    }

    fn level0_proposal(&self) -> ConditionalProposal {
        let var = RWM_STD * RWM_STD;
        ConditionalProposal {
            // Density w.r.t. the prior reference measure.
            log_density: Arc::new(move |to: &Point, from: &Point| {
                let lebesgue: Real = to
                    .coords
                    .iter()
                    .zip(&from.coords)
                    .map(|(t, f)| {
                        let d = t - f;
                        -0.5 * (d * d / var + (2.0 * std::f64::consts::PI * var).ln())
                    })
                    .sum();
                lebesgue - log_standard_normal(&to.coords)
            }),
            sampler: Arc::new(move |from: &Point, rng: &mut dyn rand::RngCore| {
                Point::new(
                    from.coords
                        .iter()
                        .map(|c| {
                            let z: Real = StandardNormal.sample(rng);
                            c + RWM_STD * z
                        })
                        .collect(),
                )
            }),
            symmetric: false,
        }
    }

    fn level0_init(&self) -> Point {
        Point::new(vec![0.0; DIM])
    }

    fn proposal(&self, _level: usize, warm: Option<&[Point]>) -> IndependentProposal {
        match warm {
            None => IndependentProposal {
                // The prior itself: density 1 w.r.t. the prior.
                log_density: Arc::new(|_: &Point| 0.0),
                sampler: kde::prior_proposal(DIM).sampler,
            },
            Some(states) => {
                let mixture = kde::kde_mixture_proposal(states, DIM, KDE_PRIOR_WEIGHT);
                let lebesgue = mixture.log_density;
                IndependentProposal {
                    log_density: Arc::new(move |x: &Point| {
                        lebesgue(x) - log_standard_normal(&x.coords)
                    }),
                    sampler: mixture.sampler,
                }
            }
        }
    }

    fn wants_warm_proposals(&self) -> bool {
        true
    }

    fn exact_mean(&self, _level: usize) -> Option<Real> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_kappa_matches_closed_form() {
        // theta = 0 gives kappa = 1 and the one-dimensional solution
        // u = x1 (1 - x1) / 2 with mean 1/12 and peak 1/8.
        let sol = darcy_solve(2, &Point::new(vec![0.0; 4])).unwrap();
        assert_abs_diff_eq!(sol.qoi, 1.0 / 12.0, epsilon = 1e-4);
        let max = sol.u.iter().cloned().fold(0.0, Real::max);
        assert_abs_diff_eq!(max, 0.125, epsilon = 1e-3);
        // Center observation sits at the peak; (0.1, 0.5) on the parabola.
        let center = sol.observations[4 * OBS_PER_SIDE + 4];
        assert_abs_diff_eq!(center, 0.125, epsilon = 1e-3);
        let edge = sol.observations[4 * OBS_PER_SIDE];
        assert_abs_diff_eq!(edge, 0.1 * 0.9 / 2.0, epsilon = 1e-3);
    }

    #[test]
    fn refinement_error_shrinks_four_fold() {
        let exact = 1.0 / 12.0;
        let errs: Vec<Real> = (0..=2)
            .map(|l| (darcy_solve(l, &Point::new(vec![0.0; 4])).unwrap().qoi - exact).abs())
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(
                (3.5..=4.5).contains(&ratio),
                "second-order error decay violated: {errs:?}"
            );
        }
    }

    #[test]
    fn solution_constant_in_x2() {
        // kappa depends on x1 only, so every row of u is identical.
        let sol = darcy_solve(1, &Point::new(TRUE_THETA.to_vec())).unwrap();
        let m = sol.cells;
        let mut max_dev: Real = 0.0;
        for j in 1..m {
            for i in 0..m {
                max_dev = max_dev.max((sol.u[i + m * j] - sol.u[i]).abs());
            }
        }
        assert!(max_dev < 1e-10, "row variation {max_dev}");
    }

    #[test]
    fn interpolation_weights_sum_to_one() {
        let m = 32;
        let ones = vec![1.0; m * m];
        for v in observe(&ones, m) {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn solver_rejects_bad_input() {
        assert!(matches!(
            darcy_solve(5, &Point::new(vec![0.0; 4])),
            Err(DarcyError::LevelTooFine(5))
        ));
        assert!(matches!(
            darcy_solve(0, &Point::scalar(0.0)),
            Err(DarcyError::BadDimension(1))
        ));
    }

    #[test]
    fn problem_construction_and_costs() {
        let p = DarcyProblem::new(1).unwrap();
        let h = p.hierarchy();
        assert_eq!(h.max_level(), 1);
        assert_abs_diff_eq!(h.eval_cost(0).unwrap(), 256.0);
        assert_abs_diff_eq!(h.eval_cost(1).unwrap(), 1024.0);
        assert!(matches!(
            DarcyProblem::new(4),
            Err(ProblemError::LevelLimit { .. })
        ));
    }

    #[test]
    fn synthetic_data_is_reproducible() {
        let a = DarcyProblem::new(1).unwrap();
        let b = DarcyProblem::new(1).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data().len(), N_OBS);
    }

    #[test]
    fn posterior_prefers_the_true_coefficients() {
        let p = DarcyProblem::new(1).unwrap();
        let h = p.hierarchy();
        let at_truth = h.log_target(1, &Point::new(TRUE_THETA.to_vec())).unwrap();
        let at_zero = h.log_target(1, &Point::new(vec![0.0; 4])).unwrap();
        assert!(
            at_truth > at_zero + 100.0,
            "truth {at_truth} vs zero {at_zero}"
        );
    }

    #[test]
    fn qoi_closure_reuses_the_log_weight_solve() {
        // Exercise the shared cache: both closures on the same state.
        let p = DarcyProblem::new(0).unwrap();
        let h = p.hierarchy();
        let theta = Point::new(vec![0.1, -0.2, 0.3, 0.0]);
        let lw = h.log_target(0, &theta).unwrap();
        let q = h.qoi_eval(0, &theta).unwrap();
        assert!(lw.is_finite());
        assert!(q.is_finite() && q > 0.0);
        // Identical on repeat evaluation.
        assert_abs_diff_eq!(h.log_target(0, &theta).unwrap(), lw);
        assert_abs_diff_eq!(h.qoi_eval(0, &theta).unwrap(), q);
    }

    #[test]
    fn reference_proposal_density_is_relative_to_prior() {
        let p = DarcyProblem::new(0).unwrap();
        let q = p.proposal(0, None);
        // Pure prior proposal: density identically 1 against the prior.
        assert_abs_diff_eq!((q.log_density)(&Point::new(vec![0.3; 4])), 0.0);

        let warm: Vec<Point> = (0..50)
            .map(|i| Point::new(vec![0.01 * i as Real, 0.0, -0.01 * i as Real, 0.5]))
            .collect();
        let qw = p.proposal(1, Some(&warm));
        let x = Point::new(vec![0.2, 0.0, -0.2, 0.5]);
        // Mixture density w.r.t. prior = Lebesgue mixture / prior.
        let leb = (kde::kde_mixture_proposal(&warm, 4, KDE_PRIOR_WEIGHT).log_density)(&x);
        assert_abs_diff_eq!(
            (qw.log_density)(&x),
            leb - log_standard_normal(&x.coords),
            epsilon = 1e-12
        );
    }
}
