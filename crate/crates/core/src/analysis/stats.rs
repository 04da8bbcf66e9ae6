//! Small statistical helpers used by the hypothesis tests and calibration checks.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use statrs::function::erf::erfc;

/// Upper tail of χ² with `df` degrees of freedom.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if !(x > 0.0) {
        return 1.0;
    }
    if df == 1.0 {
        return erfc((x / 2.0).sqrt());
    }
    ChiSquared::new(df).map(|d| d.sf(x)).unwrap_or(f64::NAN)
}

/// Two-sided Gaussian-equivalent significance of a p-value.
pub fn sigma_from_p(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::INFINITY;
    }
    if p >= 1.0 {
        return 0.0;
    }
    let n = Normal::standard();
    n.inverse_cdf(1.0 - p / 2.0).max(0.0)
}

/// Wilson score interval for `k` successes in `n` trials at normal quantile `z`.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Asymptotic Kolmogorov distribution survival function, P(K > x).
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test of `sample` against the CDF `cdf`. Returns (D, p).
pub fn ks_test(sample: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let n = sample.len();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mut xs: Vec<f64> = sample.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let nf = n as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / nf).max((i + 1) as f64 / nf - f)
        })
        .fold(0.0, f64::max);
    // Stephens' small-sample correction.
    let en = nf.sqrt();
    (d, kolmogorov_sf((en + 0.12 + 0.11 / en) * d))
}

/// KS test for uniformity on `[lo, hi]`.
pub fn ks_uniform(sample: &[f64], lo: f64, hi: f64) -> (f64, f64) {
    ks_test(sample, |x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// Pearson χ² of observed counts against expectations, pooling adjacent
/// channels until each pooled expectation reaches `min_expected`.
/// Returns (χ², number of pooled bins).
pub fn pearson_chi2(observed: &[u64], expected: &[f64], min_expected: f64) -> (f64, usize) {
    let mut chi2 = 0.0;
    let mut bins = 0;
    let (mut o, mut e) = (0.0, 0.0);
    for (&ob, &ex) in observed.iter().zip(expected) {
        o += ob as f64;
        e += ex;
        if e >= min_expected {
            chi2 += (o - e) * (o - e) / e;
            bins += 1;
            o = 0.0;
            e = 0.0;
        }
    }
    if e > 0.0 {
        // fold the remainder into the statistic as its own (small) bin
        chi2 += (o - e) * (o - e) / e.max(min_expected);
        bins += 1;
    }
    (chi2, bins)
}

pub fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_one_dof_matches_statrs() {
        let d = ChiSquared::new(1.0).unwrap();
        for &x in &[0.01, 0.5, 3.84, 10.0, 25.0] {
            assert!((chi2_sf(x, 1.0) - d.sf(x)).abs() < 1e-10);
        }
        assert_eq!(chi2_sf(0.0, 1.0), 1.0);
        assert_eq!(chi2_sf(-1e-12, 1.0), 1.0);
    }

    #[test]
    fn sigma_of_p_one_dof_is_sqrt_statistic() {
        for &s in &[1.0, 3.0, 5.0] {
            let p = chi2_sf(s * s, 1.0);
            assert!((sigma_from_p(p) - s).abs() < 1e-6);
        }
    }

    #[test]
    fn wilson_contains_point_estimate() {
        let (lo, hi) = wilson_interval(20, 400, 1.96);
        assert!(lo < 0.05 && 0.05 < hi);
        assert!(lo > 0.03 && hi < 0.08);
        assert_eq!(wilson_interval(0, 0, 1.96), (0.0, 1.0));
        let (lo, hi) = wilson_interval(10, 10, 1.96);
        assert!(lo > 0.6 && hi == 1.0);
    }

    #[test]
    fn kolmogorov_known_quantiles() {
        // Critical values of the Kolmogorov distribution.
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-3);
        assert_eq!(kolmogorov_sf(0.0), 1.0);
    }

    #[test]
    fn ks_detects_non_uniform() {
        let evenly: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_uniform(&evenly, 0.0, 1.0).1 > 0.99);
        let squashed: Vec<f64> = evenly.iter().map(|x| x * x).collect();
        assert!(ks_uniform(&squashed, 0.0, 1.0).1 < 1e-6);
    }

    #[test]
    fn pearson_exact_match_is_zero() {
        let e = vec![10.0, 2.0, 2.0, 2.0, 30.0];
        let o = vec![10, 2, 2, 2, 30];
        let (chi2, bins) = pearson_chi2(&o, &e, 5.0);
        assert_eq!(chi2, 0.0);
        assert_eq!(bins, 3);
    }
}
