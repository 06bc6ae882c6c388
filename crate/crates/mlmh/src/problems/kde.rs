//! Adaptive independence proposals: prior/kernel-density mixtures.
//!
//! The proposal is `w * prior + (1 - w) * KDE(samples)` with a standard
//! normal prior and a Gaussian product kernel. The prior component keeps the
//! proposal tails at least as heavy as the prior's, which the independence
//! sampler needs for uniform ergodicity; the kernel component concentrates
//! proposals where a previous chain found posterior mass.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::{IndependentProposal, Point};
use crate::Real;

/// Bandwidths never collapse below this, so degenerate (zero-spread)
/// coordinates still give a proper density.
pub const BANDWIDTH_FLOOR: Real = 1e-3;

/// Largest number of support points kept for the kernel component; larger
/// sample sets are thinned with a uniform stride to bound the per-evaluation
/// cost of the mixture density.
pub const MAX_SUPPORT_POINTS: usize = 1000;

const LN_2PI: Real = 1.8378770664093453;

/// Log-density of the standard normal prior on `R^dim`.
pub fn log_standard_normal(x: &[Real]) -> Real {
    let sq: Real = x.iter().map(|v| v * v).sum();
    -0.5 * (sq + x.len() as Real * LN_2PI)
}

/// Per-coordinate Silverman bandwidths `0.9 min(sd, iqr / 1.34) n^(-1/5)`,
/// floored at [`BANDWIDTH_FLOOR`].
fn silverman_bandwidths(points: &[Vec<Real>], dim: usize) -> Vec<Real> {
    let n = points.len();
    let n_pow = (n as Real).powf(-0.2);
    (0..dim)
        .map(|i| {
            let mut col: Vec<Real> = points.iter().map(|p| p[i]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mean = col.iter().sum::<Real>() / n as Real;
            let sd = if n > 1 {
                (col.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / (n - 1) as Real).sqrt()
            } else {
                0.0
            };
            let iqr = quantile(&col, 0.75) - quantile(&col, 0.25);
            let h = 0.9 * sd.min(iqr / 1.34) * n_pow;
            if h.is_finite() && h > BANDWIDTH_FLOOR {
                h
            } else {
                BANDWIDTH_FLOOR
            }
        })
        .collect()
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile(sorted: &[Real], q: Real) -> Real {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as Real;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as Real;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Builds the mixture proposal `w * N(0, I) + (1 - w) * KDE(samples)` with
/// per-coordinate Silverman bandwidths. With no samples, or `w >= 1`, the
/// proposal is exactly the prior. The returned log-density is with respect
/// to Lebesgue measure.
pub fn kde_mixture_proposal(
    samples: &[Point],
    dim: usize,
    prior_weight: Real,
) -> IndependentProposal {
    let w = prior_weight.clamp(0.0, 1.0);
    if samples.is_empty() || w >= 1.0 {
        return prior_proposal(dim);
    }

    // Thin with a uniform stride to bound the density cost.
    let stride = samples.len().div_ceil(MAX_SUPPORT_POINTS);
    let points: Arc<Vec<Vec<Real>>> = Arc::new(
        samples
            .iter()
            .step_by(stride)
            .map(|p| {
                assert_eq!(p.dim(), dim, "support point dimension mismatch");
                p.coords.clone()
            })
            .collect(),
    );
    let bandwidths = Arc::new(silverman_bandwidths(&points, dim));
    let n = points.len();

    let log_w = w.ln();
    // ln((1 - w) / n) - sum ln h_i - dim/2 ln 2pi, the constant part of each
    // kernel term.
    let log_kde_const = (1.0 - w).ln()
        - (n as Real).ln()
        - bandwidths.iter().map(|h| h.ln()).sum::<Real>()
        - 0.5 * dim as Real * LN_2PI;

    let d_points = points.clone();
    let d_bw = bandwidths.clone();
    let log_density = Arc::new(move |x: &Point| {
        let prior_term = log_w + log_standard_normal(&x.coords);
        let mut max_term = prior_term;
        let mut terms = Vec::with_capacity(d_points.len() + 1);
        terms.push(prior_term);
        for p in d_points.iter() {
            let mut sq = 0.0;
            for ((xi, pi), h) in x.coords.iter().zip(p).zip(d_bw.iter()) {
                let z = (xi - pi) / h;
                sq += z * z;
            }
            let t = log_kde_const - 0.5 * sq;
            terms.push(t);
            if t > max_term {
                max_term = t;
            }
        }
        let sum: Real = terms.iter().map(|t| (t - max_term).exp()).sum();
        max_term + sum.ln()
    });

    let s_points = points;
    let s_bw = bandwidths;
    let sampler = Arc::new(move |rng: &mut dyn rand::RngCore| {
        let pick: Real = rng.gen();
        if pick < w {
            standard_normal_point(dim, rng)
        } else {
            let k = rng.gen_range(0..s_points.len());
            let coords = s_points[k]
                .iter()
                .zip(s_bw.iter())
                .map(|(c, h)| {
                    let z: Real = StandardNormal.sample(rng);
                    c + h * z
                })
                .collect();
            Point::new(coords)
        }
    });

    IndependentProposal {
        log_density,
        sampler,
    }
}

/// The standard normal prior on `R^dim` as an independence proposal.
pub fn prior_proposal(dim: usize) -> IndependentProposal {
    IndependentProposal {
        log_density: Arc::new(move |x: &Point| log_standard_normal(&x.coords)),
        sampler: Arc::new(move |rng: &mut dyn rand::RngCore| standard_normal_point(dim, rng)),
    }
}

fn standard_normal_point(dim: usize, rng: &mut dyn rand::RngCore) -> Point {
    Point::new((0..dim).map(|_| StandardNormal.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn probe_points(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = crate::rng::stream_rng(seed, &[crate::rng::role::PROPOSAL]);
        (0..n)
            .map(|_| {
                let z: Real = StandardNormal.sample(&mut rng);
                Point::scalar(0.5 + 1.3 * z)
            })
            .collect()
    }

    #[test]
    fn full_prior_weight_collapses_to_prior() {
        let samples = probe_points(50, 1);
        let q = kde_mixture_proposal(&samples, 1, 1.0);
        for x in [-2.0, 0.0, 0.7, 3.1] {
            assert_abs_diff_eq!(
                (q.log_density)(&Point::scalar(x)),
                log_standard_normal(&[x]),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn empty_samples_fall_back_to_prior() {
        let q = kde_mixture_proposal(&[], 3, 0.1);
        let x = Point::new(vec![0.1, -0.2, 0.3]);
        assert_abs_diff_eq!(
            (q.log_density)(&x),
            log_standard_normal(&x.coords),
            epsilon = 1e-12
        );
    }

    #[test]
    fn single_point_mixture_closed_form() {
        // One support point: sd and iqr vanish, so the bandwidth floors, and
        // the density is 0.5 prior + 0.5 N(point, floor^2).
        let p = 0.8;
        let q = kde_mixture_proposal(&[Point::scalar(p)], 1, 0.5);
        let h = BANDWIDTH_FLOOR;
        for x in [0.75, 0.8, 0.85] {
            let prior = 0.5 * (-0.5 * (x * x + LN_2PI)).exp();
            let z = (x - p) / h;
            let kernel = 0.5 * (-0.5 * z * z).exp() / (h * (2.0 * std::f64::consts::PI).sqrt());
            assert_abs_diff_eq!(
                (q.log_density)(&Point::scalar(x)).exp(),
                prior + kernel,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let samples = probe_points(200, 2);
        let q = kde_mixture_proposal(&samples, 1, 0.1);
        let (a, b, n) = (-12.0, 12.0, 24_000);
        let dx = (b - a) / n as Real;
        let mass: Real = (0..n)
            .map(|i| {
                let x = a + (i as Real + 0.5) * dx;
                (q.log_density)(&Point::scalar(x)).exp() * dx
            })
            .sum();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn sampler_matches_density_ks() {
        // Exact mixture CDF against 1e5 sampler draws; KS below 0.02.
        let support = probe_points(40, 3);
        let w = 0.1;
        let q = kde_mixture_proposal(&support, 1, w);

        let pts: Vec<Real> = support.iter().map(|p| p.as_scalar()).collect();
        let bw = silverman_bandwidths(&pts.iter().map(|&v| vec![v]).collect::<Vec<_>>(), 1)[0];
        let prior = Normal::new(0.0, 1.0).unwrap();
        let cdf = |x: Real| {
            let kde: Real = pts
                .iter()
                .map(|&p| Normal::new(p, bw).unwrap().cdf(x))
                .sum::<Real>()
                / pts.len() as Real;
            w * prior.cdf(x) + (1.0 - w) * kde
        };

        let mut rng = crate::rng::stream_rng(4, &[crate::rng::role::PROPOSAL]);
        let n = 100_000usize;
        let mut draws: Vec<Real> = (0..n).map(|_| (q.sampler)(&mut rng).as_scalar()).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: Real = 0.0;
        for (i, x) in draws.iter().enumerate() {
            let f = cdf(*x);
            ks = ks.max((f - i as Real / n as Real).abs());
            ks = ks.max(((i + 1) as Real / n as Real - f).abs());
        }
        assert!(ks < 0.02, "KS distance {ks}");
    }

    #[test]
    fn degenerate_coordinate_keeps_density_finite() {
        // Second coordinate constant across samples: floored bandwidth.
        let samples: Vec<Point> = (0..20)
            .map(|i| Point::new(vec![i as Real * 0.1, 7.0]))
            .collect();
        let q = kde_mixture_proposal(&samples, 2, 0.1);
        let v = (q.log_density)(&Point::new(vec![0.5, 7.0]));
        assert!(v.is_finite());
        let far = (q.log_density)(&Point::new(vec![0.5, 8.0]));
        assert!(far.is_finite());
        // Off the degenerate plane the kernel mass is tiny: the prior
        // component dominates.
        assert!(far < v);
    }

    #[test]
    fn oversized_sample_sets_are_thinned() {
        let samples = probe_points(5 * MAX_SUPPORT_POINTS, 5);
        let q = kde_mixture_proposal(&samples, 1, 0.1);
        let v = (q.log_density)(&Point::scalar(0.4));
        assert!(v.is_finite());
        // Determinism: rebuilding gives the identical density.
        let q2 = kde_mixture_proposal(&samples, 1, 0.1);
        assert_abs_diff_eq!(v, (q2.log_density)(&Point::scalar(0.4)));
    }

    #[test]
    fn quantile_interpolates() {
        let sorted = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(quantile(&sorted, 0.0), 1.0);
        assert_abs_diff_eq!(quantile(&sorted, 1.0), 4.0);
        assert_abs_diff_eq!(quantile(&sorted, 0.5), 2.5);
    }
}
