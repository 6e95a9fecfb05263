//! Small robust-statistics helpers shared by the detectors and the harness.

use std::f64::consts::PI;

/// Median; even-length input gives the mean of the central pair. Empty input gives NaN.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    let n = v.len();
    let mid = n / 2;
    let (_, hi, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let hi = *hi;
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Flags values whose modified Z-score `0.6745 |x - med| / MAD` exceeds `sigma`.
///
/// With a zero MAD the mean absolute deviation takes its place; if that is
/// also zero nothing is flagged.
pub fn modified_zscore_outliers(values: &[f64], sigma: f64) -> Vec<bool> {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    let mut spread = median(&dev);
    let mut k = 0.6745;
    if !(spread > 0.0) {
        spread = dev.iter().sum::<f64>() / dev.len().max(1) as f64;
        // mean absolute deviation of a normal is 0.7979 sigma
        k = 0.7979;
    }
    if !(spread > 0.0) {
        return vec![false; values.len()];
    }
    dev.iter().map(|d| k * d / spread > sigma).collect()
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    } else if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

pub fn circular_mean(angles: &[f64]) -> f64 {
    let (s, c) = angles.iter().fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    s.atan2(c)
}

/// Wilson score interval for `k` successes out of `n` at 95% confidence.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n = n as f64;
    let p = k as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Kolmogorov-Smirnov distance between a sample and a continuous CDF.
pub fn ks_distance(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn zscore_flags_single_outlier() {
        let mask = modified_zscore_outliers(&[1.0, 1.0, 1.0, 1.0, 10.0], 3.5);
        assert_eq!(mask, vec![false, false, false, false, true]);
    }

    #[test]
    fn zscore_constant_has_no_outliers() {
        assert!(modified_zscore_outliers(&[2.0; 9], 3.5).iter().all(|&b| !b));
    }

    #[test]
    fn zscore_gaussian_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let flagged = modified_zscore_outliers(&x, 3.5).iter().filter(|&&b| b).count();
        assert!(flagged <= 10, "{flagged}");
    }

    #[test]
    fn wilson_bounds() {
        let (lo, hi) = wilson_interval(50, 100);
        assert!(lo < 0.5 && hi > 0.5);
        assert!((lo - 0.4038).abs() < 1e-3 && (hi - 0.5962).abs() < 1e-3);
        let (lo, hi) = wilson_interval(100, 100);
        assert!(hi == 1.0 && lo > 0.96);
    }

    #[test]
    fn circular_mean_across_wrap() {
        let m = circular_mean(&[PI - 0.1, -PI + 0.1]);
        assert!((wrap_angle(m - PI)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn median_is_between_min_and_max(v in proptest::collection::vec(-1e6f64..1e6, 1..50)) {
            let m = median(&v);
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo && m <= hi);
        }

        #[test]
        fn wrap_angle_range(a in -100.0f64..100.0) {
            let w = wrap_angle(a);
            prop_assert!(w > -PI - 1e-12 && w <= PI + 1e-12);
            prop_assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-9 || (1.0 - ((a - w) / (2.0 * PI)).fract().abs()) < 1e-9);
        }
    }
}
