//! Estimators and error decomposition for the multilevel telescoping sum.
//!
//! Each level contributes the correction series `Y_n = G_l(fine_n) -
//! G_{l-1}(coarse_n)` (level 0 contributes the plain quantity-of-interest
//! series). The multilevel estimate is the sum of the per-level series means.
//! Because the series are Markov chain outputs, the variance of a series mean
//! is estimated with batched means, which absorbs autocorrelation without an
//! explicit correlation-time estimate; the integrated autocorrelation time is
//! still reported as a diagnostic.
//!
//! Deterministic reductions use pairwise summation so results do not depend
//! on accumulation order or platform.

use thiserror::Error;

use crate::sampler::ChainRun;
use crate::scalar::Scalar;
use crate::Real;

/// Errors from estimator construction.
#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("series of length {len} too short for batch size {batch} (need >= 2 batches)")]
    TooShort { len: usize, batch: usize },
    #[error("batch size must be >= 1")]
    ZeroBatch,
    #[error("level statistics must cover contiguous levels 0..=L, got {0:?}")]
    NonContiguous(Vec<usize>),
    #[error("empty input")]
    Empty,
    #[error("sample counts and variances must have equal nonzero length")]
    LengthMismatch,
}

/// Sums a slice pairwise, splitting recursively so rounding error grows like
/// `O(log n)` instead of `O(n)` and the result is independent of chunking.
pub fn pairwise_sum<S: Scalar>(xs: &[S]) -> S {
    if xs.len() <= 32 {
        let mut acc = S::zero();
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean via pairwise summation; zero for an empty slice.
pub fn pairwise_mean<S: Scalar>(xs: &[S]) -> S {
    if xs.is_empty() {
        return S::zero();
    }
    pairwise_sum(xs) / S::from_count(xs.len())
}

/// Plain sample variance (denominator `n - 1`); zero when `n < 2`.
pub fn sample_var<S: Scalar>(xs: &[S]) -> S {
    if xs.len() < 2 {
        return S::zero();
    }
    let m = pairwise_mean(xs);
    let sq: Vec<S> = xs.iter().map(|&x| (x - m) * (x - m)).collect();
    pairwise_sum(&sq) / S::from_count(xs.len() - 1)
}

/// Per-level correction series: fine minus coarse quantity of interest at
/// levels `>= 1`, the raw series at level 0.
pub fn y_series(run: &ChainRun) -> Vec<Real> {
    if run.level == 0 {
        run.qoi_fine.clone()
    } else {
        run.qoi_fine
            .iter()
            .zip(&run.qoi_coarse)
            .map(|(f, c)| f - c)
            .collect()
    }
}

/// Asymptotic variance of a correlated series by the method of batched means:
/// split into `b = floor(n / m)` consecutive batches of size `m`, discard the
/// tail, and return `m / (b - 1) * sum_k (B_k - mean(B))^2` where `B_k` are
/// batch means. For an uncorrelated series this estimates the plain variance;
/// for a correlated one it absorbs the autocorrelation time, so the variance
/// of the full-series mean is approximately the returned value divided by `n`.
pub fn batched_means_var<S: Scalar>(series: &[S], batch_size: usize) -> Result<S, EstimatorError> {
    if batch_size == 0 {
        return Err(EstimatorError::ZeroBatch);
    }
    let b = series.len() / batch_size;
    if b < 2 {
        return Err(EstimatorError::TooShort {
            len: series.len(),
            batch: batch_size,
        });
    }
    let means: Vec<S> = (0..b)
        .map(|k| pairwise_mean(&series[k * batch_size..(k + 1) * batch_size]))
        .collect();
    let grand = pairwise_mean(&means);
    let sq: Vec<S> = means.iter().map(|&x| (x - grand) * (x - grand)).collect();
    Ok(S::from_count(batch_size) * pairwise_sum(&sq) / S::from_count(b - 1))
}

/// Default batch size `floor(sqrt(n))`, clipped to at least 1.
pub fn default_batch_size(n: usize) -> usize {
    ((n as Real).sqrt().floor() as usize).max(1)
}

/// Integrated autocorrelation time `1 + 2 sum_k rho_k`, truncating the sum at
/// the first non-positive autocorrelation estimate and capping the lag at
/// `n / 50`. Clipped below at 1; a constant (zero-variance) series returns 1.
pub fn iact<S: Scalar>(series: &[S]) -> S {
    let n = series.len();
    if n < 2 {
        return S::one();
    }
    let mean = pairwise_mean(series);
    let centered: Vec<S> = series.iter().map(|&x| x - mean).collect();
    let sq: Vec<S> = centered.iter().map(|&x| x * x).collect();
    let c0 = pairwise_sum(&sq) / S::from_count(n);
    if c0 <= S::zero() {
        return S::one();
    }
    let max_lag = (n / 50).min(n - 1);
    let mut tau = S::one();
    for k in 1..=max_lag {
        let prods: Vec<S> = (0..n - k).map(|i| centered[i] * centered[i + k]).collect();
        let ck = pairwise_sum(&prods) / S::from_count(n);
        let rho = ck / c0;
        if rho <= S::zero() {
            break;
        }
        tau += S::from_real(2.0) * rho;
    }
    tau.max(S::one())
}

/// Summary statistics of one level's correction series.
#[derive(Clone, Debug, serde::Serialize)]
pub struct LevelStats {
    pub level: usize,
    /// Post-burn-in sample count.
    pub n: usize,
    /// Signed mean of the correction series (telescoping contribution).
    pub mean_y: Real,
    /// Mean of the absolute corrections (coupling-decay diagnostic).
    pub mean_abs_y: Real,
    /// Asymptotic variance of the correction series (batched means).
    pub var_y: Real,
    /// Plain sample variance of the correction series.
    pub var_y_plain: Real,
    /// Integrated autocorrelation time of the correction series.
    pub iact_y: Real,
    /// Mean of the fine-chain quantity of interest.
    pub mean_qoi_fine: Real,
    /// Plain sample variance of the fine-chain quantity of interest.
    pub var_qoi_fine: Real,
    /// Fraction of post-burn-in steps with both chains at the same point
    /// (1 for level 0).
    pub sync_rate: Real,
    /// Model evaluation cost of one step at this level.
    pub step_cost: Real,
    /// Total model evaluation work spent on the run, burn-in included.
    pub work: Real,
}

/// Computes [`LevelStats`] from a finished run, using the default batch size.
pub fn level_stats(run: &ChainRun) -> Result<LevelStats, EstimatorError> {
    let y = y_series(run);
    if y.is_empty() {
        return Err(EstimatorError::Empty);
    }
    let abs_y: Vec<Real> = y.iter().map(|v| v.abs()).collect();
    let m = default_batch_size(y.len());
    let var_y = if y.len() / m >= 2 {
        batched_means_var(&y, m)?
    } else {
        sample_var(&y)
    };
    Ok(LevelStats {
        level: run.level,
        n: y.len(),
        mean_y: pairwise_mean(&y),
        mean_abs_y: pairwise_mean(&abs_y),
        var_y,
        var_y_plain: sample_var(&y),
        iact_y: iact(&y),
        mean_qoi_fine: pairwise_mean(&run.qoi_fine),
        var_qoi_fine: sample_var(&run.qoi_fine),
        sync_rate: run.sync_rate(),
        step_cost: run.step_cost,
        work: run.work,
    })
}

/// Multilevel estimate: the sum of per-level correction means over a
/// contiguous hierarchy `0..=L`.
pub fn ml_estimate(stats: &[LevelStats]) -> Result<Real, EstimatorError> {
    if stats.is_empty() {
        return Err(EstimatorError::Empty);
    }
    let mut levels: Vec<usize> = stats.iter().map(|s| s.level).collect();
    let mut sorted = levels.clone();
    sorted.sort_unstable();
    if sorted.iter().enumerate().any(|(i, &l)| l != i) {
        levels.sort_unstable();
        return Err(EstimatorError::NonContiguous(levels));
    }
    let mut by_level = stats.to_vec();
    by_level.sort_by_key(|s| s.level);
    let means: Vec<Real> = by_level.iter().map(|s| s.mean_y).collect();
    Ok(pairwise_sum(&means))
}

/// Mean-square error decomposition of a multilevel estimate.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct ErrorReport {
    /// Statistical term `2 (L+1) sum_l sigma2_l / N_l`.
    pub statistical: Real,
    /// Squared-bias term `2 (|Y_L| / (1 - s^-alpha_w))^2`.
    pub bias_sq: Real,
    /// Sum of the two terms.
    pub total: Real,
    /// Tolerance the report was judged against.
    pub tol: Real,
    /// True when `total <= tol^2`.
    pub converged: bool,
}

/// Builds an [`ErrorReport`] from per-level asymptotic variances and sample
/// counts, the finest-level correction mean, and the fitted weak-error decay
/// rate `alpha_w` with respect to refinement factor `s`.
pub fn error_report(
    sigma2: &[Real],
    n_samples: &[usize],
    mean_y_finest: Real,
    alpha_w: Real,
    s: Real,
    tol: Real,
) -> Result<ErrorReport, EstimatorError> {
    if sigma2.is_empty() || sigma2.len() != n_samples.len() {
        return Err(EstimatorError::LengthMismatch);
    }
    let levels = sigma2.len();
    let terms: Vec<Real> = sigma2
        .iter()
        .zip(n_samples)
        .map(|(v, &n)| v / (n.max(1) as Real))
        .collect();
    let statistical = 2.0 * levels as Real * pairwise_sum(&terms);
    let geom = 1.0 - s.powf(-alpha_w);
    let bias_sq = 2.0 * (mean_y_finest.abs() / geom).powi(2);
    let total = statistical + bias_sq;
    Ok(ErrorReport {
        statistical,
        bias_sq,
        total,
        tol,
        converged: total <= tol * tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn batched_means_two_level_example() {
        // Batch size 4 gives batch means {1, 3}: 4 / 1 * ((1-2)^2 + (3-2)^2) = 8.
        let series = [1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0];
        let v: Real = batched_means_var(&series, 4).unwrap();
        assert_abs_diff_eq!(v, 8.0, epsilon = 1e-12);
    }

    #[test]
    fn batched_means_discards_tail() {
        let series = [1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0, 99.0];
        let v: Real = batched_means_var(&series, 4).unwrap();
        assert_abs_diff_eq!(v, 8.0, epsilon = 1e-12);
    }

    #[test]
    fn batched_means_errors() {
        assert!(matches!(
            batched_means_var(&[1.0, 2.0, 3.0], 2),
            Err(EstimatorError::TooShort { .. })
        ));
        assert!(matches!(
            batched_means_var(&[1.0, 2.0], 0),
            Err(EstimatorError::ZeroBatch)
        ));
    }

    #[test]
    fn batched_means_iid_recovers_unit_variance() {
        let mut rng = crate::rng::stream_rng(101, &[0]);
        let series: Vec<Real> = (0..100_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let v = batched_means_var(&series, default_batch_size(series.len())).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 0.1);
    }

    #[test]
    fn iact_iid_is_one() {
        let mut rng = crate::rng::stream_rng(102, &[0]);
        let series: Vec<Real> = (0..100_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        assert_abs_diff_eq!(iact(&series), 1.0, epsilon = 0.05);
    }

    #[test]
    fn iact_ar1_matches_closed_form() {
        // AR(1) with phi = 0.5 has IACT (1 + phi) / (1 - phi) = 3.
        let phi = 0.5;
        let mut rng = crate::rng::stream_rng(103, &[0]);
        let mut x = 0.0;
        let series: Vec<Real> = (0..400_000)
            .map(|_| {
                let e: Real = StandardNormal.sample(&mut rng);
                x = phi * x + e;
                x
            })
            .collect();
        assert_abs_diff_eq!(iact(&series), 3.0, epsilon = 0.3);
    }

    #[test]
    fn iact_constant_series_is_one() {
        let series = vec![2.5; 1000];
        assert_abs_diff_eq!(iact(&series), 1.0);
        assert_abs_diff_eq!(iact(&[] as &[Real]), 1.0);
        assert_abs_diff_eq!(iact(&[1.0]), 1.0);
    }

    #[test]
    fn iact_never_below_one() {
        // Strongly negatively correlated series would sum below 1 without the
        // clip; truncation at the first non-positive correlation plus the
        // floor keeps it at 1.
        let series: Vec<Real> = (0..10_000)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        assert!(iact(&series) >= 1.0);
    }

    #[test]
    fn error_report_frozen_example() {
        // 2 levels, sigma2 = 1 each, N = 100 each: statistical = 2*2*0.02 = 0.08.
        // Finest mean 0.1, alpha_w = 1, s = 2: bias_sq = 2*(0.1/0.5)^2 = 0.08.
        let r = error_report(&[1.0, 1.0], &[100, 100], 0.1, 1.0, 2.0, 1.0).unwrap();
        assert_abs_diff_eq!(r.statistical, 0.08, epsilon = 1e-12);
        assert_abs_diff_eq!(r.bias_sq, 0.08, epsilon = 1e-12);
        assert_abs_diff_eq!(r.total, 0.16, epsilon = 1e-12);
        assert!(r.converged);

        let tight = error_report(&[1.0, 1.0], &[100, 100], 0.1, 1.0, 2.0, 0.3).unwrap();
        assert!(!tight.converged);
    }

    #[test]
    fn ml_estimate_requires_contiguous_levels() {
        let mk = |level, mean_y| LevelStats {
            level,
            n: 10,
            mean_y,
            mean_abs_y: mean_y,
            var_y: 1.0,
            var_y_plain: 1.0,
            iact_y: 1.0,
            mean_qoi_fine: 0.0,
            var_qoi_fine: 1.0,
            sync_rate: 1.0,
            step_cost: 1.0,
            work: 10.0,
        };
        let good = vec![mk(1, 0.25), mk(0, 1.0), mk(2, 0.125)];
        assert_abs_diff_eq!(ml_estimate(&good).unwrap(), 1.375, epsilon = 1e-12);

        let gap = vec![mk(0, 1.0), mk(2, 0.125)];
        assert!(matches!(
            ml_estimate(&gap),
            Err(EstimatorError::NonContiguous(_))
        ));
        assert!(matches!(ml_estimate(&[]), Err(EstimatorError::Empty)));
    }

    proptest! {
        #[test]
        fn pairwise_sum_matches_naive(xs in prop::collection::vec(-1e6..1e6f64, 0..300)) {
            let naive: f64 = xs.iter().sum();
            let pair = pairwise_sum(&xs);
            let scale = 1.0 + xs.iter().map(|x| x.abs()).sum::<f64>();
            prop_assert!((naive - pair).abs() <= 1e-9 * scale);
        }

        #[test]
        fn batched_variance_nonnegative(xs in prop::collection::vec(-10.0..10.0f64, 8..200),
                                        m in 1usize..8) {
            if xs.len() / m >= 2 {
                let v = batched_means_var(&xs, m).unwrap();
                prop_assert!(v >= 0.0);
            }
        }

        #[test]
        fn iact_bounded(xs in prop::collection::vec(-10.0..10.0f64, 2..400)) {
            let t = iact(&xs);
            let cap = 1.0 + 2.0 * (xs.len() / 50) as f64;
            prop_assert!(t >= 1.0);
            prop_assert!(t <= cap + 1e-9);
        }
    }
}
