//! Multi-exponential lifetime spectrum convolved with a Gaussian timing response.
//!
//! Rates are carried in μs⁻¹ and times in ns. Each component contributes an
//! exponentially modified Gaussian (EMG); the prompt peak is the bare Gaussian
//! response at `t0`. Channel contents are differences of closed-form CDFs,
//! so coarse channels are integrated exactly.

use serde::{Deserialize, Serialize};

use crate::error::{domain, ensure_finite, Result};
use crate::histogram::ChannelGeometry;
use crate::special::{erfcx, norm_cdf, norm_pdf, FWHM_PER_SIGMA};
use statrs::function::erf::erfc;

pub const NS_PER_US: f64 = 1000.0;

/// One annihilation channel: decay rate (μs⁻¹) and event fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayComponent {
    pub rate: f64,
    pub intensity: f64,
}

impl DecayComponent {
    pub fn new(rate: f64, intensity: f64) -> Result<Self> {
        let c = Self { rate, intensity };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("rate", self.rate)?;
        ensure_finite("intensity", self.intensity)?;
        if self.rate <= 0.0 {
            return Err(domain(format!("rate must be > 0, got {}", self.rate)));
        }
        if self.intensity < 0.0 {
            return Err(domain(format!("intensity must be >= 0, got {}", self.intensity)));
        }
        Ok(())
    }

    #[inline]
    pub fn rate_per_ns(&self) -> f64 {
        self.rate / NS_PER_US
    }

    /// Mean lifetime in ns.
    pub fn mean_lifetime(&self) -> f64 {
        NS_PER_US / self.rate
    }
}

/// Mean lifetime of a component in ns (reciprocal of its rate).
pub fn mean_lifetime(c: &DecayComponent) -> f64 {
    c.mean_lifetime()
}

/// Gaussian timing response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstrumentResponse {
    /// Full width at half maximum, ns.
    pub fwhm: f64,
    /// Time-zero offset, ns.
    pub t0: f64,
}

impl InstrumentResponse {
    pub fn new(fwhm: f64, t0: f64) -> Result<Self> {
        let irf = Self { fwhm, t0 };
        irf.validate()?;
        Ok(irf)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("fwhm", self.fwhm)?;
        ensure_finite("t0", self.t0)?;
        if self.fwhm < 0.0 {
            return Err(domain(format!("fwhm must be >= 0, got {}", self.fwhm)));
        }
        Ok(())
    }

    #[inline]
    pub fn sigma(&self) -> f64 {
        self.fwhm / FWHM_PER_SIGMA
    }
}

/// Full spectral model: components, response, prompt peak and flat background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumModel {
    pub components: Vec<DecayComponent>,
    pub irf: InstrumentResponse,
    /// Fraction of true coincidences in the instantaneous (t ≈ t0) peak.
    pub prompt_fraction: f64,
    /// Expected accidental counts per channel.
    pub background_per_channel: f64,
    /// Expected number of true coincidence events.
    pub total_events: f64,
}

/// Tolerance on `Σ I_i + prompt_fraction` exceeding one.
pub const FRACTION_SUM_TOL: f64 = 1e-9;

impl SpectrumModel {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(domain("model needs at least one component"));
        }
        for c in &self.components {
            c.validate()?;
        }
        self.irf.validate()?;
        ensure_finite("prompt_fraction", self.prompt_fraction)?;
        ensure_finite("background_per_channel", self.background_per_channel)?;
        ensure_finite("total_events", self.total_events)?;
        if !(0.0..=1.0).contains(&self.prompt_fraction) {
            return Err(domain(format!(
                "prompt_fraction must lie in [0, 1], got {}",
                self.prompt_fraction
            )));
        }
        if self.background_per_channel < 0.0 {
            return Err(domain("background_per_channel must be >= 0"));
        }
        if self.total_events < 0.0 {
            return Err(domain("total_events must be >= 0"));
        }
        let sum = self.fraction_sum();
        if sum > 1.0 + FRACTION_SUM_TOL {
            return Err(domain(format!(
                "intensities plus prompt fraction sum to {sum} > 1"
            )));
        }
        Ok(())
    }

    /// `Σ I_i + prompt_fraction`.
    pub fn fraction_sum(&self) -> f64 {
        self.components.iter().map(|c| c.intensity).sum::<f64>() + self.prompt_fraction
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Flattens into the natural parameter vector (see [`ModelParam`]).
    pub fn to_params(&self) -> Vec<f64> {
        let n = self.components.len();
        let mut p = vec![0.0; ModelParam::count(n)];
        for (i, c) in self.components.iter().enumerate() {
            p[ModelParam::Rate(i).index(n)] = c.rate;
            p[ModelParam::Intensity(i).index(n)] = c.intensity;
        }
        p[ModelParam::PromptFraction.index(n)] = self.prompt_fraction;
        p[ModelParam::TimeZero.index(n)] = self.irf.t0;
        p[ModelParam::Fwhm.index(n)] = self.irf.fwhm;
        p[ModelParam::Background.index(n)] = self.background_per_channel;
        p[ModelParam::TotalEvents.index(n)] = self.total_events;
        p
    }

    /// Inverse of [`SpectrumModel::to_params`]; does not validate.
    pub fn from_params(n: usize, p: &[f64]) -> Self {
        assert_eq!(p.len(), ModelParam::count(n), "parameter vector length");
        Self {
            components: (0..n)
                .map(|i| DecayComponent {
                    rate: p[ModelParam::Rate(i).index(n)],
                    intensity: p[ModelParam::Intensity(i).index(n)],
                })
                .collect(),
            irf: InstrumentResponse {
                fwhm: p[ModelParam::Fwhm.index(n)],
                t0: p[ModelParam::TimeZero.index(n)],
            },
            prompt_fraction: p[ModelParam::PromptFraction.index(n)],
            background_per_channel: p[ModelParam::Background.index(n)],
            total_events: p[ModelParam::TotalEvents.index(n)],
        }
    }
}

/// Natural model parameters, in the order used by parameter vectors and Jacobians.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelParam {
    Rate(usize),
    Intensity(usize),
    PromptFraction,
    TimeZero,
    Fwhm,
    Background,
    TotalEvents,
}

impl ModelParam {
    pub fn count(n_components: usize) -> usize {
        2 * n_components + 5
    }

    pub fn index(self, n: usize) -> usize {
        match self {
            Self::Rate(i) => i,
            Self::Intensity(i) => n + i,
            Self::PromptFraction => 2 * n,
            Self::TimeZero => 2 * n + 1,
            Self::Fwhm => 2 * n + 2,
            Self::Background => 2 * n + 3,
            Self::TotalEvents => 2 * n + 4,
        }
    }

    pub fn from_index(index: usize, n: usize) -> Self {
        match index {
            i if i < n => Self::Rate(i),
            i if i < 2 * n => Self::Intensity(i - n),
            i if i == 2 * n => Self::PromptFraction,
            i if i == 2 * n + 1 => Self::TimeZero,
            i if i == 2 * n + 2 => Self::Fwhm,
            i if i == 2 * n + 3 => Self::Background,
            i if i == 2 * n + 4 => Self::TotalEvents,
            _ => panic!("parameter index {index} out of range for {n} components"),
        }
    }

    pub fn all(n: usize) -> impl Iterator<Item = ModelParam> {
        (0..Self::count(n)).map(move |i| Self::from_index(i, n))
    }

    pub fn is_fraction(self) -> bool {
        matches!(self, Self::Intensity(_) | Self::PromptFraction)
    }

    pub fn name(self) -> String {
        match self {
            Self::Rate(i) => format!("rate_{i}"),
            Self::Intensity(i) => format!("intensity_{i}"),
            Self::PromptFraction => "prompt_fraction".into(),
            Self::TimeZero => "t0".into(),
            Self::Fwhm => "fwhm".into(),
            Self::Background => "background".into(),
            Self::TotalEvents => "total_events".into(),
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        let indexed = |prefix: &str| name.strip_prefix(prefix).and_then(|s| s.parse().ok());
        match name {
            "prompt_fraction" => Some(Self::PromptFraction),
            "t0" => Some(Self::TimeZero),
            "fwhm" => Some(Self::Fwhm),
            "background" => Some(Self::Background),
            "total_events" => Some(Self::TotalEvents),
            _ => indexed("rate_")
                .map(Self::Rate)
                .or_else(|| indexed("intensity_").map(Self::Intensity)),
        }
    }
}

// ---------------------------------------------------------------------------
// Closed-form kernels
// ---------------------------------------------------------------------------

/// `exp(λ²σ²/2 − λx)·Φ((x − λσ²)/σ)`, the exponential part of the EMG CDF.
///
/// `lambda` in ns⁻¹, `x = t − t0` in ns.
fn emg_tail(x: f64, lambda: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return if x >= 0.0 { (-lambda * x).exp() } else { 0.0 };
    }
    let z = (lambda * sigma * sigma - x) / (sigma * std::f64::consts::SQRT_2);
    if z > 0.0 {
        0.5 * erfcx(z) * (-0.5 * (x / sigma).powi(2)).exp()
    } else {
        0.5 * (0.5 * (lambda * sigma).powi(2) - lambda * x).exp() * erfc(z)
    }
}

/// Gaussian quantities at one channel edge, shared by every kernel.
#[derive(Debug, Clone, Copy)]
struct Edge {
    /// `t − t0`, ns.
    x: f64,
    cdf: f64,
    sf: f64,
    /// φ(x/σ), the standard normal density at the reduced coordinate.
    pdf: f64,
}

impl Edge {
    fn new(x: f64, sigma: f64) -> Self {
        if sigma == 0.0 {
            let (cdf, sf) = if x >= 0.0 { (1.0, 0.0) } else { (0.0, 1.0) };
            return Self { x, cdf, sf, pdf: 0.0 };
        }
        let u = x / sigma;
        // Evaluate the smaller tail directly; the complement is then exact enough.
        let (cdf, sf) = if u > 0.0 {
            let sf = norm_cdf(-u);
            (1.0 - sf, sf)
        } else {
            let cdf = norm_cdf(u);
            (cdf, 1.0 - cdf)
        };
        Self { x, cdf, sf, pdf: norm_pdf(u) }
    }
}

/// Unit-intensity integral of one kernel over a channel and its derivatives.
#[derive(Debug, Clone, Copy, Default)]
struct ChannelTerms {
    value: f64,
    /// ∂/∂λ with λ in ns⁻¹.
    d_lambda: f64,
    d_t0: f64,
    d_sigma: f64,
}

/// EMG channel integral between edges `a < b` with precomputed tails.
fn emg_channel(a: &Edge, b: &Edge, ta: f64, tb: f64, lambda: f64, sigma: f64) -> ChannelTerms {
    // Subtract survival functions right of t0 and CDFs left of it, so both
    // the far tail and the rising edge keep full relative precision.
    let value = if a.x >= 0.0 {
        (a.sf - b.sf) + (ta - tb)
    } else {
        (b.cdf - a.cdf) - (tb - ta)
    };
    let s2 = sigma * sigma;
    let d_lambda_at = |e: &Edge, t: f64| (e.x - lambda * s2) * t + sigma * e.pdf;
    let d_sigma_at = |e: &Edge, t: f64| lambda * e.pdf - lambda * lambda * sigma * t;
    ChannelTerms {
        value: value.max(0.0),
        d_lambda: d_lambda_at(b, tb) - d_lambda_at(a, ta),
        d_t0: -lambda * (tb - ta),
        d_sigma: if sigma > 0.0 { d_sigma_at(b, tb) - d_sigma_at(a, ta) } else { 0.0 },
    }
}

fn gauss_channel(a: &Edge, b: &Edge, sigma: f64) -> ChannelTerms {
    let value = if a.x >= 0.0 { a.sf - b.sf } else { b.cdf - a.cdf };
    if sigma == 0.0 {
        return ChannelTerms { value: value.max(0.0), ..Default::default() };
    }
    ChannelTerms {
        value: value.max(0.0),
        d_lambda: 0.0,
        d_t0: -(b.pdf - a.pdf) / sigma,
        d_sigma: -(b.x * b.pdf - a.x * a.pdf) / (sigma * sigma),
    }
}

fn check_time(t: f64) -> Result<()> {
    ensure_finite("t", t)
}

/// Density of one component at time `t` (ns), in events per ns per unit `total_events`.
///
/// Integrates over the real line to `c.intensity`.
pub fn eval_component(c: &DecayComponent, irf: &InstrumentResponse, t: f64) -> Result<f64> {
    c.validate()?;
    irf.validate()?;
    check_time(t)?;
    let lambda = c.rate_per_ns();
    Ok(c.intensity * lambda * emg_tail(t - irf.t0, lambda, irf.sigma()))
}

/// CDF of one component (unit intensity) at time `t`.
pub fn component_cdf(c: &DecayComponent, irf: &InstrumentResponse, t: f64) -> Result<f64> {
    c.validate()?;
    irf.validate()?;
    check_time(t)?;
    let x = t - irf.t0;
    let sigma = irf.sigma();
    Ok(Edge::new(x, sigma).cdf - emg_tail(x, c.rate_per_ns(), sigma))
}

/// Density of the prompt (Gaussian) peak per unit fraction.
pub fn eval_prompt(irf: &InstrumentResponse, t: f64) -> Result<f64> {
    irf.validate()?;
    check_time(t)?;
    let sigma = irf.sigma();
    if sigma == 0.0 {
        return Err(domain("prompt density undefined for a zero-width response"));
    }
    Ok(norm_pdf((t - irf.t0) / sigma) / sigma)
}

// ---------------------------------------------------------------------------
// Channel expectations
// ---------------------------------------------------------------------------

/// Expected counts per channel.
pub fn expected_counts(model: &SpectrumModel, geom: &ChannelGeometry) -> Result<Vec<f64>> {
    model.validate()?;
    geom.validate()?;
    let mut out = vec![0.0; geom.n_channels];
    accumulate(model, geom, &mut out, None);
    Ok(out)
}

/// Expected counts together with the Jacobian with respect to every natural
/// parameter (rates in μs⁻¹, fwhm in ns).
///
/// The Jacobian is column-major: entry `(k, p)` sits at `p * n_channels + k`,
/// with `p` ordered as in [`ModelParam`]. Intensities are treated as
/// independent coordinates here; the simplex constraint is the fitter's concern.
pub fn expected_counts_with_jacobian(
    model: &SpectrumModel,
    geom: &ChannelGeometry,
) -> Result<(Vec<f64>, Vec<f64>)> {
    model.validate()?;
    geom.validate()?;
    let mut out = vec![0.0; geom.n_channels];
    let mut jac = vec![0.0; geom.n_channels * ModelParam::count(model.n_components())];
    accumulate(model, geom, &mut out, Some(&mut jac));
    Ok((out, jac))
}

/// Shared evaluation loop; assumes the model and geometry are valid.
///
/// Also used by the fitter on slightly perturbed parameter vectors (e.g. a
/// fraction a hair below zero), where the expressions stay well defined.
pub(crate) fn accumulate(
    model: &SpectrumModel,
    geom: &ChannelGeometry,
    out: &mut [f64],
    mut jac: Option<&mut [f64]>,
) {
    let n = model.n_components();
    let nch = geom.n_channels;
    let sigma = model.irf.sigma();
    let total = model.total_events;
    let col = |p: ModelParam| p.index(n) * nch;
    let (c_t0, c_fwhm, c_total) =
        (col(ModelParam::TimeZero), col(ModelParam::Fwhm), col(ModelParam::TotalEvents));

    let edges: Vec<Edge> =
        (0..=nch).map(|k| Edge::new(geom.edge(k) - model.irf.t0, sigma)).collect();
    let mut tails = vec![0.0; nch + 1];

    let mut add = |k: usize, weight: f64, t: ChannelTerms, rate_col: Option<usize>, frac_col: usize, out: &mut [f64]| {
        out[k] += total * weight * t.value;
        if let Some(j) = jac.as_deref_mut() {
            if let Some(rc) = rate_col {
                j[rc + k] += total * weight * t.d_lambda / NS_PER_US;
            }
            j[frac_col + k] += total * t.value;
            j[c_t0 + k] += total * weight * t.d_t0;
            j[c_fwhm + k] += total * weight * t.d_sigma / FWHM_PER_SIGMA;
            j[c_total + k] += weight * t.value;
        }
    };

    for (i, c) in model.components.iter().enumerate() {
        let lambda = c.rate_per_ns();
        for (t, e) in tails.iter_mut().zip(&edges) {
            *t = emg_tail(e.x, lambda, sigma);
        }
        let (rc, fc) = (col(ModelParam::Rate(i)), col(ModelParam::Intensity(i)));
        for k in 0..nch {
            let t = emg_channel(&edges[k], &edges[k + 1], tails[k], tails[k + 1], lambda, sigma);
            add(k, c.intensity, t, Some(rc), fc, out);
        }
    }

    let fc = col(ModelParam::PromptFraction);
    for k in 0..nch {
        add(k, model.prompt_fraction, gauss_channel(&edges[k], &edges[k + 1], sigma), None, fc, out);
    }

    for v in out.iter_mut() {
        *v += model.background_per_channel;
    }
    if let Some(j) = jac {
        let cb = col(ModelParam::Background);
        j[cb..cb + nch].fill(1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn irf(fwhm: f64) -> InstrumentResponse {
        InstrumentResponse { fwhm, t0: 50.0 }
    }

    #[test]
    fn mean_lifetime_examples() {
        let theor = DecayComponent::new(7.039979, 0.3).unwrap();
        let exp = DecayComponent::new(7.0404, 0.3).unwrap();
        let unit = DecayComponent::new(1.0, 1.0).unwrap();
        assert!((mean_lifetime(&theor) - 142.046).abs() < 5e-4);
        assert!((mean_lifetime(&exp) - 142.037).abs() < 5e-4);
        assert_eq!(mean_lifetime(&unit), 1000.0);
    }

    #[test]
    fn zero_width_response_is_pure_exponential() {
        let c = DecayComponent::new(7.039979, 0.3).unwrap();
        let r = irf(0.0);
        for &dt in &[0.1, 5.0, 100.0, 700.0] {
            let got = eval_component(&c, &r, r.t0 + dt).unwrap();
            let lam = c.rate_per_ns();
            let want = 0.3 * lam * (-lam * dt).exp();
            assert!((got - want).abs() <= 1e-14 * want);
        }
        assert_eq!(eval_component(&c, &r, r.t0 - 1.0).unwrap(), 0.0);
    }

    #[test]
    fn density_vanishes_in_far_tail() {
        let c = DecayComponent::new(7.04, 1.0).unwrap();
        let d = eval_component(&c, &irf(1.7), 1e6).unwrap();
        assert!((0.0..1e-300).contains(&d));
        // Far left of t0 as well, without NaN from the exponential.
        let fast = DecayComponent::new(8000.0, 1.0).unwrap();
        let left = eval_component(&fast, &irf(1.7), -1e3).unwrap();
        assert!(left == 0.0 || (left > 0.0 && left < 1e-300));
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let c = DecayComponent { rate: 7.0, intensity: 1.0 };
        assert!(eval_component(&c, &irf(1.7), f64::NAN).is_err());
        let bad = DecayComponent { rate: f64::INFINITY, intensity: 1.0 };
        assert!(eval_component(&bad, &irf(1.7), 1.0).is_err());
        assert!(DecayComponent::new(0.0, 1.0).is_err());
        assert!(DecayComponent::new(1.0, -0.1).is_err());
        assert!(InstrumentResponse::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn cdf_limits() {
        let c = DecayComponent::new(50.0, 1.0).unwrap();
        let r = irf(1.7);
        assert!(component_cdf(&c, &r, -100.0).unwrap().abs() < 1e-15);
        assert!((component_cdf(&c, &r, 5000.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn param_names_round_trip() {
        for p in ModelParam::all(3) {
            assert_eq!(ModelParam::parse(&p.name()), Some(p));
            assert_eq!(ModelParam::from_index(p.index(3), 3), p);
        }
        assert_eq!(ModelParam::parse("rate_x"), None);
    }

    #[test]
    fn params_round_trip() {
        let m = SpectrumModel {
            components: vec![
                DecayComponent { rate: 8000.0, intensity: 0.05 },
                DecayComponent { rate: 50.0, intensity: 0.65 },
                DecayComponent { rate: 7.04, intensity: 0.3 },
            ],
            irf: irf(1.7),
            prompt_fraction: 0.0,
            background_per_channel: 2.0,
            total_events: 1e6,
        };
        assert_eq!(SpectrumModel::from_params(3, &m.to_params()), m);
    }

    #[test]
    fn fraction_sum_above_one_rejected() {
        let m = SpectrumModel {
            components: vec![DecayComponent { rate: 7.0, intensity: 0.9 }],
            irf: irf(1.7),
            prompt_fraction: 0.2,
            background_per_channel: 0.0,
            total_events: 1.0,
        };
        assert!(m.validate().is_err());
    }
}
