//! Descriptive statistics used by the report: ECDFs, quartiles, sample
//! standard deviation and Student t confidence intervals.
//!
//! Everything here is generic over [`num_traits::Float`] so the same code
//! serves `f32` sample streams (resource samples) and `f64` latencies.
//!
//! Quartiles use linear interpolation between closest ranks: for sorted
//! samples `x[0..n]` and probability `p`, `h = (n - 1) p` and the quantile
//! is `x[floor(h)] + (h - floor(h)) (x[floor(h) + 1] - x[floor(h)])`.

use num_traits::Float;
use thiserror::Error;

use crate::tdist;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("no samples")]
    Empty,
    #[error("need at least {needed} samples, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("sample {index} is not finite")]
    NonFinite { index: usize },
}

fn to_t<T: Float>(v: f64) -> T {
    T::from(v).expect("f64 constant representable in target float")
}

fn count<T: Float>(n: usize) -> T {
    T::from(n).expect("sample count representable in target float")
}

fn sorted_finite<T: Float>(samples: &[T]) -> Result<Vec<T>, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::Empty);
    }
    if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite { index });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values are ordered"));
    Ok(sorted)
}

/// Empirical cumulative distribution function.
///
/// Holds one point per distinct sample value; the probability attached to
/// a value is the fraction of samples less than or equal to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf<T> {
    points: Vec<(T, T)>,
    n: usize,
}

impl<T: Float> Ecdf<T> {
    pub fn from_samples(samples: &[T]) -> Result<Self, StatsError> {
        let sorted = sorted_finite(samples)?;
        let n = sorted.len();
        let total = count::<T>(n);
        let mut points: Vec<(T, T)> = Vec::new();
        for (i, &v) in sorted.iter().enumerate() {
            let is_last_of_run = i + 1 == n || sorted[i + 1] != v;
            if is_last_of_run {
                points.push((v, count::<T>(i + 1) / total));
            }
        }
        Ok(Self { points, n })
    }

    /// `(value, cumulative probability)` pairs, values strictly ascending.
    pub fn points(&self) -> &[(T, T)] {
        &self.points
    }

    pub fn sample_count(&self) -> usize {
        self.n
    }

    /// F(x): fraction of samples `<= x`.
    pub fn eval(&self, x: T) -> T {
        let idx = self.points.partition_point(|&(v, _)| v <= x);
        if idx == 0 {
            T::zero()
        } else {
            self.points[idx - 1].1
        }
    }
}

pub fn mean<T: Float>(samples: &[T]) -> Result<T, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::Empty);
    }
    let sum = samples.iter().fold(T::zero(), |acc, &v| acc + v);
    Ok(sum / count::<T>(samples.len()))
}

/// Sample standard deviation (n - 1 denominator).
pub fn stddev<T: Float>(samples: &[T]) -> Result<T, StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: samples.len(),
        });
    }
    let m = mean(samples)?;
    let ss = samples.iter().fold(T::zero(), |acc, &v| acc + (v - m) * (v - m));
    Ok((ss / count::<T>(samples.len() - 1)).sqrt())
}

/// Quantile of already sorted samples by linear interpolation.
pub fn quantile_sorted<T: Float>(sorted: &[T], p: T) -> Result<T, StatsError> {
    if sorted.is_empty() {
        return Err(StatsError::Empty);
    }
    let h = count::<T>(sorted.len() - 1) * p;
    let lo = h.floor();
    let lo_idx = lo.to_usize().unwrap_or(0).min(sorted.len() - 1);
    let hi_idx = (lo_idx + 1).min(sorted.len() - 1);
    Ok(sorted[lo_idx] + (h - lo) * (sorted[hi_idx] - sorted[lo_idx]))
}

pub fn quantile<T: Float>(samples: &[T], p: T) -> Result<T, StatsError> {
    quantile_sorted(&sorted_finite(samples)?, p)
}

/// Two-sided Student t confidence interval for the mean at `level`
/// (e.g. 0.99).
pub fn confidence_interval<T: Float>(samples: &[T], level: f64) -> Result<(T, T), StatsError> {
    let sd = stddev(samples)?;
    let m = mean(samples)?;
    let n = samples.len();
    let t = tdist::quantile(0.5 + level / 2.0, (n - 1) as f64);
    let half = to_t::<T>(t) * sd / count::<T>(n).sqrt();
    Ok((m - half, m + half))
}

/// 99% confidence interval for the mean: `mean ± t(0.995, n-1) s / sqrt(n)`.
pub fn confidence_interval_99<T: Float>(samples: &[T]) -> Result<(T, T), StatsError> {
    confidence_interval(samples, 0.99)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary<T> {
    pub n: usize,
    pub mean: T,
    /// `None` when fewer than two samples are available.
    pub stddev: Option<T>,
    pub min: T,
    pub max: T,
    pub q25: T,
    pub q50: T,
    pub q75: T,
    pub ci99: Option<(T, T)>,
}

impl<T: Float> Summary<T> {
    /// Summarizes `samples`. A single sample yields a partial summary
    /// without standard deviation and confidence interval.
    pub fn from_samples(samples: &[T]) -> Result<Self, StatsError> {
        let sorted = sorted_finite(samples)?;
        let q = |p: f64| quantile_sorted(&sorted, to_t::<T>(p));
        let (stddev, ci99) = if sorted.len() >= 2 {
            (Some(stddev(&sorted)?), Some(confidence_interval_99(&sorted)?))
        } else {
            (None, None)
        };
        Ok(Self {
            n: sorted.len(),
            mean: mean(&sorted)?,
            stddev,
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            q25: q(0.25)?,
            q50: q(0.50)?,
            q75: q(0.75)?,
            ci99,
        })
    }

    pub fn ci99_half_width(&self) -> Option<T> {
        self.ci99.map(|(lo, hi)| (hi - lo) / to_t::<T>(2.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn ecdf_single_sample() {
        let e = Ecdf::from_samples(&[5.0f64]).unwrap();
        assert_eq!(e.points(), &[(5.0, 1.0)]);
    }

    #[test]
    fn ecdf_ties_step_by_k_over_n() {
        let e = Ecdf::from_samples(&[1.0f64, 2.0, 2.0, 4.0]).unwrap();
        assert_eq!(e.points(), &[(1.0, 0.25), (2.0, 0.75), (4.0, 1.0)]);
        assert_eq!(e.eval(0.5), 0.0);
        assert_eq!(e.eval(2.0), 0.75);
        assert_eq!(e.eval(3.9), 0.75);
        assert_eq!(e.eval(100.0), 1.0);
    }

    #[test]
    fn ecdf_empty_is_error() {
        assert_eq!(Ecdf::<f64>::from_samples(&[]), Err(StatsError::Empty));
    }

    #[test]
    fn ecdf_rejects_nan() {
        assert_eq!(
            Ecdf::from_samples(&[1.0f32, f32::NAN]),
            Err(StatsError::NonFinite { index: 1 })
        );
    }

    #[test]
    fn ecdf_reads_two_thirds_below_threshold() {
        // 660 of 1000 at or below 15 ms -> F(15 ms) = 0.66
        let mut v: Vec<f64> = (0..660).map(|i| 1.0 + (i % 14) as f64).collect();
        v.extend((0..340).map(|i| 20.0 + i as f64));
        let e = Ecdf::from_samples(&v).unwrap();
        assert_relative_eq!(e.eval(15.0), 0.66);
    }

    #[test]
    fn summary_zero_inflated() {
        let s = Summary::from_samples(&[0.0f64, 0.0, 0.0, 100.0]).unwrap();
        assert_eq!(s.mean, 25.0);
        assert_eq!(s.q25, 0.0);
        assert_eq!(s.q50, 0.0);
        assert_eq!(s.q75, 25.0);
    }

    #[test]
    fn summary_constant_has_zero_width_ci() {
        let s = Summary::from_samples(&[7.0f64; 10]).unwrap();
        assert_eq!(s.stddev, Some(0.0));
        assert_eq!(s.ci99, Some((7.0, 7.0)));
    }

    #[test]
    fn summary_single_sample_is_partial() {
        let s = Summary::from_samples(&[3.0f32]).unwrap();
        assert_eq!(s.n, 1);
        assert_eq!(s.stddev, None);
        assert_eq!(s.ci99, None);
        assert_eq!(s.q75, 3.0);
    }

    #[test]
    fn cpu_like_zero_inflation_puts_q75_below_mean() {
        // mostly idle samples with rare bursts, the shape of a busy sender
        let mut v = vec![0.0f64; 70];
        v.extend([5.0; 10]);
        v.extend([90.0; 20]);
        let s = Summary::from_samples(&v).unwrap();
        assert_eq!(s.q25, 0.0);
        assert_eq!(s.q50, 0.0);
        assert!(s.q75 < s.mean, "q75 {} mean {}", s.q75, s.mean);
    }

    #[test]
    fn ci99_two_samples_uses_t_table_value() {
        let (lo, hi) = confidence_interval_99(&[0.0f64, 2.0]).unwrap();
        // t(0.995, 1) = 63.657; s = sqrt(2), sqrt(n) = sqrt(2)
        assert_relative_eq!(hi - 1.0, 63.657, max_relative = 1e-4);
        assert_relative_eq!(1.0 - lo, 63.657, max_relative = 1e-4);
    }

    #[test]
    fn ci99_needs_two_samples() {
        assert!(confidence_interval_99(&[1.0f64]).is_err());
    }

    #[test]
    fn ci99_large_n_approaches_normal() {
        // deterministic spread of 10 000 samples
        let v: Vec<f64> = (0..10_000).map(|i| ((i * 7919) % 10_007) as f64).collect();
        let (lo, hi) = confidence_interval_99(&v).unwrap();
        let sd = stddev(&v).unwrap();
        let normal_half = 2.575_829_303_549 * sd / (v.len() as f64).sqrt();
        assert_relative_eq!((hi - lo) / 2.0, normal_half, max_relative = 0.01);
    }

    #[test]
    fn f32_and_f64_agree() {
        let v64 = [1.5f64, 2.25, 9.0, 4.0, 4.0];
        let v32: Vec<f32> = v64.iter().map(|&v| v as f32).collect();
        let a = Summary::from_samples(&v64).unwrap();
        let b = Summary::from_samples(&v32).unwrap();
        assert_relative_eq!(a.mean as f32, b.mean, max_relative = 1e-6);
        assert_relative_eq!(a.q75 as f32, b.q75, max_relative = 1e-6);
        let (alo, _) = a.ci99.unwrap();
        let (blo, _) = b.ci99.unwrap();
        assert_relative_eq!(alo as f32, blo, max_relative = 1e-5);
    }

    fn counting_oracle(samples: &[f64], v: f64) -> f64 {
        samples.iter().filter(|&&x| x <= v).count() as f64 / samples.len() as f64
    }

    proptest! {
        #[test]
        fn ecdf_matches_counting(samples in prop::collection::vec(-1e6f64..1e6, 1..200)) {
            let e = Ecdf::from_samples(&samples).unwrap();
            let pts = e.points();
            for w in pts.windows(2) {
                prop_assert!(w[0].0 < w[1].0);
                prop_assert!(w[0].1 < w[1].1);
            }
            prop_assert_eq!(pts.last().unwrap().1, 1.0);
            for &(v, p) in pts {
                prop_assert_eq!(p, counting_oracle(&samples, v));
            }
        }

        #[test]
        fn quartiles_ordered_and_ci_contains_mean(samples in prop::collection::vec(-1e3f64..1e3, 2..100)) {
            let s = Summary::from_samples(&samples).unwrap();
            prop_assert!(s.q25 <= s.q50 && s.q50 <= s.q75);
            let (lo, hi) = s.ci99.unwrap();
            prop_assert!(lo <= s.mean && s.mean <= hi);
        }
    }
}
