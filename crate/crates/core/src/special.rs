//! Error-function helpers for the exponentially modified Gaussian.

use statrs::function::erf::erfc;

pub(crate) const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// FWHM of a Gaussian in units of its standard deviation, 2√(2 ln 2).
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Scaled complementary error function, `exp(x²)·erfc(x)`.
pub fn erfcx(x: f64) -> f64 {
    if x < 25.0 {
        (x * x).exp() * erfc(x)
    } else {
        // Asymptotic series; truncation error < 1e-13 for x >= 25.
        let inv2 = 1.0 / (2.0 * x * x);
        let series = 1.0 - inv2 + 3.0 * inv2 * inv2 - 15.0 * inv2.powi(3) + 105.0 * inv2.powi(4);
        series / (x * std::f64::consts::PI.sqrt())
    }
}

/// Standard normal CDF.
#[inline]
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn norm_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erfcx_matches_direct_product_in_overlap() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.0, 5.0, 12.0, 24.9] {
            let direct = (x * x).exp() * erfc(x);
            assert!((erfcx(x) - direct).abs() <= 1e-13 * direct, "x = {x}");
        }
    }

    #[test]
    fn erfcx_asymptotic_branch_is_continuous() {
        let below = (25.0f64 * 25.0).exp() * erfc(25.0 - 1e-12);
        let above = erfcx(25.0);
        assert!((below - above).abs() < 1e-12 * above);
        // 1/(x sqrt(pi)) leading behaviour
        let x = 1e4;
        assert!((erfcx(x) * x * std::f64::consts::PI.sqrt() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn fwhm_constant() {
        assert!((FWHM_PER_SIGMA - 2.0 * (2.0 * 2f64.ln()).sqrt()).abs() < 1e-15);
    }
}
