//! Likelihood-ratio tests for the two field-orientation protocols.

use std::collections::BTreeMap;

use crate::analysis::fit::{fit_joint, fit_mle, FitSpec};
use crate::analysis::stats::chi2_sf;
use crate::decay::ModelParam;
use crate::error::{domain, Error, Result};
use crate::histogram::Histogram;
use crate::spectrometer::ORTHO_POSITRONIUM;

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    /// Deviance difference `D_null − D_alt`, clamped at zero.
    pub statistic: f64,
    pub null_hypothesis: String,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub significance: f64,
    /// `p_value < significance`.
    pub reject: bool,
    pub effective_sigma: f64,
    /// All underlying fits converged. A result with `false` here is not a test outcome.
    pub converged: bool,
    pub deviance_null: f64,
    pub deviance_alt: f64,
    pub estimates: BTreeMap<String, f64>,
}

impl TestResult {
    fn new(null: &str, d_null: f64, d_alt: f64, significance: f64, converged: bool) -> Self {
        let statistic = (d_null - d_alt).max(0.0);
        let p_value = chi2_sf(statistic, 1.0).clamp(0.0, 1.0);
        Self {
            statistic,
            null_hypothesis: null.to_string(),
            degrees_of_freedom: 1,
            p_value,
            significance,
            reject: converged && p_value < significance,
            // For one degree of freedom √statistic is the two-sided Gaussian equivalent
            // and stays finite where the p-value underflows.
            effective_sigma: statistic.sqrt(),
            converged,
            deviance_null: d_null,
            deviance_alt: d_alt,
            estimates: BTreeMap::new(),
        }
    }

    pub fn decision(&self) -> &'static str {
        match (self.converged, self.reject) {
            (false, _) => "no_result",
            (true, true) => "reject",
            (true, false) => "fail_to_reject",
        }
    }
}

fn check_significance(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(domain(format!("significance must lie in (0, 1), got {alpha}")))
    }
}

/// Null: one delayed o-Ps intensity shared by both orientations. Alternative:
/// independent fits. `spec` is the starting point for both histograms and
/// must leave `intensity_2` free.
pub fn lr_test_doubling(h_perp: &Histogram, h_par: &Histogram, spec: &FitSpec, significance: f64) -> Result<TestResult> {
    check_significance(significance)?;
    if h_perp.geometry != h_par.geometry {
        return Err(Error::Geometry("doubling test needs histograms with identical geometry".into()));
    }
    let i2 = ModelParam::Intensity(ORTHO_POSITRONIUM);
    if spec.n_components() <= ORTHO_POSITRONIUM || !spec.param(i2).free {
        return Err(domain("doubling test needs a free intensity_2"));
    }
    let perp = fit_mle(h_perp, spec)?;
    let par = fit_mle(h_par, spec)?;

    // Null fit warm-started from the separate fits.
    let mut s_perp = spec.clone();
    s_perp.set_values(&perp.model());
    let mut s_par = spec.clone();
    s_par.set_values(&par.model());
    let pooled = 0.5 * (perp.get(i2) + par.get(i2));
    s_perp.param_mut(i2).value = pooled;
    s_par.param_mut(i2).value = pooled;
    let null = fit_joint(&[h_perp, h_par], &[s_perp, s_par], &[i2])?;

    let d_alt = perp.deviance + par.deviance;
    let converged = perp.converged && par.converged && null.converged;
    let mut r = TestResult::new("equal intensity_2 in both orientations", null.deviance, d_alt, significance, converged);
    let ratio = par.get(i2) / perp.get(i2);
    let (e_perp, e_par) = (perp.std_error(i2), par.std_error(i2));
    let ratio_err = ratio * ((e_perp / perp.get(i2)).powi(2) + (e_par / par.get(i2)).powi(2)).sqrt();
    let e = &mut r.estimates;
    e.insert("intensity_2.perpendicular".into(), perp.get(i2));
    e.insert("intensity_2.perpendicular.error".into(), e_perp);
    e.insert("intensity_2.parallel".into(), par.get(i2));
    e.insert("intensity_2.parallel.error".into(), e_par);
    e.insert("intensity_2.null".into(), null.fits[0].get(i2));
    e.insert("ratio".into(), ratio);
    e.insert("ratio.error".into(), ratio_err);
    Ok(r)
}

/// Null: the o-Ps rate equals `lambda_null` (μs⁻¹). Alternative: it is free.
pub fn lr_test_rate_shift(h: &Histogram, lambda_null: f64, spec: &FitSpec, significance: f64) -> Result<TestResult> {
    check_significance(significance)?;
    if !(lambda_null.is_finite() && lambda_null > 0.0) {
        return Err(domain(format!("lambda_null must be positive, got {lambda_null}")));
    }
    let rate = ModelParam::Rate(ORTHO_POSITRONIUM);
    if spec.n_components() <= ORTHO_POSITRONIUM {
        return Err(domain("rate-shift test needs at least three components"));
    }
    let in_unit = lambda_null / spec.rate_unit.to_per_us();
    let mut alt_spec = spec.clone();
    alt_spec.release(rate);
    let alt = fit_mle(h, &alt_spec)?;

    let mut null_spec = alt_spec.clone();
    null_spec.set_values(&alt.model());
    {
        let p = null_spec.param_mut(rate);
        p.lower = p.lower.min(in_unit);
        p.upper = p.upper.max(in_unit);
    }
    null_spec.fix(rate, in_unit);
    let null = fit_mle(h, &null_spec)?;

    let converged = alt.converged && null.converged;
    let mut r = TestResult::new("rate_2 equals lambda_null", null.deviance, alt.deviance, significance, converged);
    let f = spec.rate_unit.to_per_us();
    let est = alt.get(rate) * f;
    let err = alt.std_error(rate) * f;
    let e = &mut r.estimates;
    e.insert("lambda_null".into(), lambda_null);
    e.insert("rate_2".into(), est);
    e.insert("rate_2.error".into(), err);
    e.insert("relative_shift".into(), est / lambda_null - 1.0);
    Ok(r)
}
