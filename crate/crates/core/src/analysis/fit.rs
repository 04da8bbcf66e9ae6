//! Poisson maximum-likelihood fitting of the convolved spectrum model.
//!
//! The deviance `D = 2 Σ [μ − n + n ln(n/μ)]` is minimized with a damped
//! Gauss–Newton (Levenberg–Marquardt) iteration on the expected Fisher
//! matrix, using the analytic Jacobian of the channel expectations.
//!
//! Positive parameters (rates, fwhm, event total) are optimized on a log
//! scale. The free intensities and the prompt fraction share the mass left by
//! the fixed ones and are mapped to unconstrained coordinates by stick
//! breaking, so `Σ I_i + prompt = 1` holds at every iterate. Covariances come
//! from the observed information in the natural (linear) coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::background::{estimate_background, pre_peak_window};
use crate::decay::{accumulate, ModelParam, SpectrumModel, NS_PER_US};
use crate::error::{domain, Error, Result};
use crate::histogram::{ChannelGeometry, Histogram};

/// Bound, initial value and free/fixed flag of one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub value: f64,
    #[serde(default = "yes")]
    pub free: bool,
    #[serde(default = "neg_inf")]
    pub lower: f64,
    #[serde(default = "pos_inf")]
    pub upper: f64,
}

fn yes() -> bool {
    true
}
fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}
fn pos_inf() -> f64 {
    f64::INFINITY
}

impl ParamSpec {
    pub fn free(value: f64) -> Self {
        Self { value, free: true, lower: f64::NEG_INFINITY, upper: f64::INFINITY }
    }

    pub fn fixed(value: f64) -> Self {
        Self { free: false, ..Self::free(value) }
    }

    pub fn bounded(mut self, lower: f64, upper: f64) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }
}

/// Unit in which a fit specification carries decay rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RateUnit {
    #[default]
    #[serde(rename = "per_us")]
    PerMicrosecond,
    #[serde(rename = "per_ns")]
    PerNanosecond,
}

impl RateUnit {
    /// Multiply a rate in this unit by this factor to get μs⁻¹.
    pub fn to_per_us(self) -> f64 {
        match self {
            Self::PerMicrosecond => 1.0,
            Self::PerNanosecond => NS_PER_US,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PerMicrosecond => "per_us",
            Self::PerNanosecond => "per_ns",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Poisson deviance (the estimator).
    #[default]
    Poisson,
    /// Neyman χ² with weights 1/max(n, 1); for cross-checks only.
    LeastSquares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpec {
    pub rates: Vec<ParamSpec>,
    pub intensities: Vec<ParamSpec>,
    pub prompt_fraction: ParamSpec,
    pub t0: ParamSpec,
    pub fwhm: ParamSpec,
    pub background: ParamSpec,
    pub total_events: ParamSpec,
    #[serde(default)]
    pub rate_unit: RateUnit,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Relative deviance change below which an accepted step counts as converged.
    #[serde(default = "default_convergence_tol")]
    pub convergence_tol: f64,
    /// Largest allowed `|g_j| / sqrt(F_jj)` (gradient in units of the local curvature).
    #[serde(default = "default_gradient_tol")]
    pub gradient_tol: f64,
}

fn default_max_iterations() -> usize {
    200
}
fn default_convergence_tol() -> f64 {
    1e-9
}
fn default_gradient_tol() -> f64 {
    1e-3
}

impl FitSpec {
    /// Spec initialized at `model`. With three or more components the fastest
    /// (para-positronium) rate and intensity are held fixed; everything else is free.
    pub fn from_model(model: &SpectrumModel) -> Self {
        let n = model.n_components();
        let pin_first = n >= 3;
        let rates = model
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let p = ParamSpec::free(c.rate).bounded(0.0, f64::INFINITY);
                if i == 0 && pin_first {
                    ParamSpec { free: false, ..p }
                } else {
                    p
                }
            })
            .collect();
        let intensities = model
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let p = ParamSpec::free(c.intensity).bounded(0.0, 1.0);
                if i == 0 && pin_first {
                    ParamSpec { free: false, ..p }
                } else {
                    p
                }
            })
            .collect();
        Self {
            rates,
            intensities,
            prompt_fraction: ParamSpec::free(model.prompt_fraction).bounded(0.0, 1.0),
            t0: ParamSpec::free(model.irf.t0),
            fwhm: ParamSpec::free(model.irf.fwhm).bounded(0.0, f64::INFINITY),
            background: ParamSpec::free(model.background_per_channel).bounded(0.0, f64::INFINITY),
            total_events: ParamSpec::free(model.total_events).bounded(0.0, f64::INFINITY),
            rate_unit: RateUnit::PerMicrosecond,
            objective: Objective::Poisson,
            max_iterations: default_max_iterations(),
            convergence_tol: default_convergence_tol(),
            gradient_tol: default_gradient_tol(),
        }
    }

    /// Starting point derived from the data: background from the pre-peak
    /// window, event total from the net sum, t0 at the highest channel. Rates,
    /// intensities and fwhm come from `template`.
    pub fn guess(h: &Histogram, template: &SpectrumModel) -> Self {
        let mut m = template.clone();
        let peak = h
            .counts
            .iter()
            .enumerate()
            .max_by_key(|&(_, c)| *c)
            .map(|(k, _)| k)
            .unwrap_or(0);
        m.irf.t0 = h.geometry.center(peak);
        let window = pre_peak_window(h, &m.irf);
        m.background_per_channel = if window.len() >= 4 {
            estimate_background(h, window).map(|b| b.mean).unwrap_or(0.0)
        } else {
            0.0
        };
        let net = h.total() as f64 - m.background_per_channel * h.n_channels() as f64;
        m.total_events = net.max(1.0);
        Self::from_model(&m)
    }

    pub fn n_components(&self) -> usize {
        self.rates.len()
    }

    pub fn param(&self, p: ModelParam) -> &ParamSpec {
        match p {
            ModelParam::Rate(i) => &self.rates[i],
            ModelParam::Intensity(i) => &self.intensities[i],
            ModelParam::PromptFraction => &self.prompt_fraction,
            ModelParam::TimeZero => &self.t0,
            ModelParam::Fwhm => &self.fwhm,
            ModelParam::Background => &self.background,
            ModelParam::TotalEvents => &self.total_events,
        }
    }

    pub fn param_mut(&mut self, p: ModelParam) -> &mut ParamSpec {
        match p {
            ModelParam::Rate(i) => &mut self.rates[i],
            ModelParam::Intensity(i) => &mut self.intensities[i],
            ModelParam::PromptFraction => &mut self.prompt_fraction,
            ModelParam::TimeZero => &mut self.t0,
            ModelParam::Fwhm => &mut self.fwhm,
            ModelParam::Background => &mut self.background,
            ModelParam::TotalEvents => &mut self.total_events,
        }
    }

    pub fn fix(&mut self, p: ModelParam, value: f64) -> &mut Self {
        let s = self.param_mut(p);
        s.value = value;
        s.free = false;
        self
    }

    pub fn release(&mut self, p: ModelParam) -> &mut Self {
        self.param_mut(p).free = true;
        self
    }

    pub fn fix_all(&mut self) -> &mut Self {
        for p in ModelParam::all(self.n_components()) {
            self.param_mut(p).free = false;
        }
        self
    }

    /// Re-expresses rate values and bounds in `unit`.
    pub fn with_rate_unit(mut self, unit: RateUnit) -> Self {
        let scale = self.rate_unit.to_per_us() / unit.to_per_us();
        for r in &mut self.rates {
            r.value *= scale;
            r.lower *= scale;
            r.upper *= scale;
        }
        self.rate_unit = unit;
        self
    }

    /// Overwrites initial values from a model (rates converted to this spec's unit).
    pub fn set_values(&mut self, model: &SpectrumModel) {
        let n = self.n_components();
        let f = self.rate_unit.to_per_us();
        for (p, v) in ModelParam::all(n).zip(model.to_params()) {
            self.param_mut(p).value = if matches!(p, ModelParam::Rate(_)) { v / f } else { v };
        }
    }

    pub fn n_varied(&self) -> usize {
        let n = self.n_components();
        let fractions = ModelParam::all(n).filter(|p| p.is_fraction() && self.param(*p).free).count();
        let scalars = ModelParam::all(n).filter(|p| !p.is_fraction() && self.param(*p).free).count();
        scalars + fractions.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_components();
        if n == 0 {
            return Err(domain("fit spec needs at least one component"));
        }
        if self.intensities.len() != n {
            return Err(domain(format!(
                "{} rates but {} intensities",
                n,
                self.intensities.len()
            )));
        }
        for p in ModelParam::all(n) {
            let s = self.param(p);
            if !s.value.is_finite() {
                return Err(domain(format!("{}: initial value must be finite", p.name())));
            }
            if s.lower.is_nan() || s.upper.is_nan() || s.lower > s.upper {
                return Err(domain(format!("{}: inconsistent bounds", p.name())));
            }
            if s.value < s.lower || s.value > s.upper {
                return Err(domain(format!(
                    "{}: initial value {} outside [{}, {}]",
                    p.name(),
                    s.value,
                    s.lower,
                    s.upper
                )));
            }
            let positive = matches!(p, ModelParam::Rate(_) | ModelParam::Fwhm | ModelParam::TotalEvents);
            if positive && s.free && s.value <= 0.0 {
                return Err(domain(format!("{}: free value must be > 0", p.name())));
            }
            if (p.is_fraction() || p == ModelParam::Background) && s.value < 0.0 {
                return Err(domain(format!("{}: value must be >= 0", p.name())));
            }
        }
        let fixed_mass: f64 = ModelParam::all(n)
            .filter(|p| p.is_fraction() && !self.param(*p).free)
            .map(|p| self.param(p).value)
            .sum();
        if fixed_mass > 1.0 + 1e-9 {
            return Err(domain(format!("fixed fractions sum to {fixed_mass} > 1")));
        }
        if !(self.convergence_tol > 0.0 && self.gradient_tol > 0.0) {
            return Err(domain("tolerances must be positive"));
        }
        Ok(())
    }

    /// The model at the initial values, rates in μs⁻¹.
    pub fn initial_model(&self) -> SpectrumModel {
        let n = self.n_components();
        SpectrumModel::from_params(n, &self.natural_values())
    }

    fn natural_values(&self) -> Vec<f64> {
        let f = self.rate_unit.to_per_us();
        ModelParam::all(self.n_components())
            .map(|p| {
                let v = self.param(p).value;
                if matches!(p, ModelParam::Rate(_)) {
                    v * f
                } else {
                    v
                }
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Coordinates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum Coord {
    /// Optimized as ln(value in spec units).
    Log(ModelParam),
    Linear(ModelParam),
    /// Stick-breaking logit for the `j`-th free fraction.
    Stick(usize),
}

/// Map between unconstrained optimizer coordinates and natural parameters
/// (model units, rates in μs⁻¹) for one histogram.
#[derive(Debug, Clone)]
struct Layout {
    n: usize,
    coords: Vec<Coord>,
    /// Free fractions in stick order; the last one takes the remaining mass.
    sticks: Vec<ModelParam>,
    mass: f64,
    base: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    rate_factor: f64,
}

const STICK_EPS: f64 = 1e-9;
/// Logit range kept away from saturation so gradients stay representable.
const STICK_LIMIT: f64 = 30.0;

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Layout {
    /// `lead` (if a free fraction) is placed first in stick order so that it
    /// is controlled by a single coordinate and can be shared across histograms.
    fn new(spec: &FitSpec, lead: Option<ModelParam>) -> Result<(Self, Vec<f64>)> {
        spec.validate()?;
        let n = spec.n_components();
        let rate_factor = spec.rate_unit.to_per_us();
        let mut base = spec.natural_values();
        let mut lower = vec![f64::NEG_INFINITY; base.len()];
        let mut upper = vec![f64::INFINITY; base.len()];
        for p in ModelParam::all(n) {
            let s = spec.param(p);
            let f = if matches!(p, ModelParam::Rate(_)) { rate_factor } else { 1.0 };
            lower[p.index(n)] = s.lower * f;
            upper[p.index(n)] = s.upper * f;
        }
        let bi = ModelParam::Background.index(n);
        lower[bi] = lower[bi].max(0.0);

        let is_free_fraction = |p: ModelParam| p.is_fraction() && spec.param(p).free;
        let mut sticks: Vec<ModelParam> = Vec::new();
        if let Some(l) = lead.filter(|&l| is_free_fraction(l)) {
            sticks.push(l);
        }
        for p in (0..n).rev().map(ModelParam::Intensity).chain([ModelParam::PromptFraction]) {
            if is_free_fraction(p) && !sticks.contains(&p) {
                sticks.push(p);
            }
        }
        let fixed_mass: f64 = ModelParam::all(n)
            .filter(|p| p.is_fraction() && !spec.param(*p).free)
            .map(|p| base[p.index(n)])
            .sum();
        let mass = (1.0 - fixed_mass).max(0.0);
        let free_sum: f64 = sticks.iter().map(|p| base[p.index(n)]).sum();
        for p in &sticks {
            let v = &mut base[p.index(n)];
            *v = if free_sum > 0.0 { *v * mass / free_sum } else { mass / sticks.len() as f64 };
        }

        let mut coords = Vec::new();
        for i in 0..n {
            if spec.rates[i].free {
                coords.push(Coord::Log(ModelParam::Rate(i)));
            }
        }
        for j in 0..sticks.len().saturating_sub(1) {
            coords.push(Coord::Stick(j));
        }
        for (p, log) in [
            (ModelParam::TimeZero, false),
            (ModelParam::Fwhm, true),
            (ModelParam::Background, false),
            (ModelParam::TotalEvents, true),
        ] {
            if spec.param(p).free {
                coords.push(if log { Coord::Log(p) } else { Coord::Linear(p) });
            }
        }
        let layout = Self { n, coords, sticks, mass, base, lower, upper, rate_factor };
        let x0 = layout.natural_to_coords(&layout.base);
        Ok((layout, x0))
    }

    fn dim(&self) -> usize {
        self.coords.len()
    }

    fn n_natural(&self) -> usize {
        self.base.len()
    }

    fn unit(&self, p: ModelParam) -> f64 {
        if matches!(p, ModelParam::Rate(_)) {
            self.rate_factor
        } else {
            1.0
        }
    }

    /// Parameter a coordinate controls (for sharing and reporting).
    fn tag(&self, c: usize) -> ModelParam {
        match self.coords[c] {
            Coord::Log(p) | Coord::Linear(p) => p,
            Coord::Stick(j) => self.sticks[j],
        }
    }

    fn natural_to_coords(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut rem = self.mass;
        let mut stick_z = Vec::with_capacity(self.sticks.len());
        for p in self.sticks.iter().take(self.sticks.len().saturating_sub(1)) {
            let ratio = if rem > 0.0 { theta[p.index(n)] / rem } else { 0.5 };
            let s = ratio.clamp(STICK_EPS, 1.0 - STICK_EPS);
            stick_z.push((s / (1.0 - s)).ln());
            rem *= 1.0 - s;
        }
        self.coords
            .iter()
            .map(|c| match *c {
                Coord::Log(p) => (theta[p.index(n)].max(f64::MIN_POSITIVE) / self.unit(p)).ln(),
                Coord::Linear(p) => theta[p.index(n)],
                Coord::Stick(j) => stick_z[j],
            })
            .collect()
    }

    fn to_natural(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut theta = self.base.clone();
        let mut stick_s = vec![(0.0, 0.0); self.sticks.len()];
        for (c, &xi) in self.coords.iter().zip(x) {
            match *c {
                Coord::Log(p) => theta[p.index(n)] = xi.exp() * self.unit(p),
                Coord::Linear(p) => theta[p.index(n)] = xi,
                Coord::Stick(j) => stick_s[j] = (logistic(xi), logistic(-xi)),
            }
        }
        let mut rem = self.mass;
        let k = self.sticks.len();
        for (j, p) in self.sticks.iter().enumerate() {
            if j + 1 == k {
                theta[p.index(n)] = rem;
            } else {
                theta[p.index(n)] = rem * stick_s[j].0;
                rem *= stick_s[j].1;
            }
        }
        theta
    }

    /// dθ/dx, `n_natural × dim`.
    fn tangent(&self, x: &[f64], theta: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        let mut t = DMatrix::zeros(self.n_natural(), self.dim());
        let k = self.sticks.len();
        let mut stick_coord = vec![usize::MAX; k];
        let mut s = vec![0.0; k];
        let mut sc = vec![0.0; k];
        for (c, coord) in self.coords.iter().enumerate() {
            match *coord {
                Coord::Log(p) => t[(p.index(n), c)] = theta[p.index(n)],
                Coord::Linear(p) => t[(p.index(n), c)] = 1.0,
                Coord::Stick(j) => {
                    stick_coord[j] = c;
                    s[j] = logistic(x[c]);
                    sc[j] = logistic(-x[c]);
                }
            }
        }
        let mut rem = self.mass;
        for (j, p) in self.sticks.iter().enumerate() {
            let row = p.index(n);
            let f = theta[row];
            let last = j + 1 == k;
            for i in 0..j {
                t[(row, stick_coord[i])] = -f * s[i];
            }
            if !last {
                t[(row, stick_coord[j])] = rem * s[j] * sc[j];
                rem *= sc[j];
            }
        }
        t
    }

    /// dθ/dξ for the linearized natural coordinates ξ (one per optimizer
    /// coordinate: the parameter itself, or the stick's own fraction with the
    /// remainder absorbing the change).
    fn linear_tangent(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut a = DMatrix::zeros(self.n_natural(), self.dim());
        for (c, coord) in self.coords.iter().enumerate() {
            match *coord {
                Coord::Log(p) | Coord::Linear(p) => a[(p.index(n), c)] = 1.0,
                Coord::Stick(j) => {
                    a[(self.sticks[j].index(n), c)] = 1.0;
                    a[(self.sticks[self.sticks.len() - 1].index(n), c)] = -1.0;
                }
            }
        }
        a
    }

    /// Coordinate `c` sits on a bound and the gradient `g` pushes it outward.
    fn at_bound(&self, c: usize, x: f64, g: f64) -> bool {
        const EDGE: f64 = 1e-6;
        let n = self.n;
        match self.coords[c] {
            Coord::Stick(_) => {
                (logistic(x) < EDGE && g > 0.0) || (logistic(-x) < EDGE && g < 0.0)
            }
            Coord::Linear(p) => {
                let (lo, hi) = (self.lower[p.index(n)], self.upper[p.index(n)]);
                (x <= lo && g > 0.0) || (x >= hi && g < 0.0)
            }
            Coord::Log(p) => {
                let u = self.unit(p);
                let v = x.exp();
                let (lo, hi) = (self.lower[p.index(n)] / u, self.upper[p.index(n)] / u);
                (v <= lo && g > 0.0) || (v >= hi && g < 0.0)
            }
        }
    }

    /// Clamps scalar parameters into their bounds.
    fn project(&self, x: &mut [f64]) {
        let n = self.n;
        for (c, coord) in self.coords.iter().enumerate() {
            match *coord {
                Coord::Log(p) => {
                    let u = self.unit(p);
                    let (lo, hi) = (self.lower[p.index(n)] / u, self.upper[p.index(n)] / u);
                    let v = x[c].exp();
                    if v < lo && lo > 0.0 {
                        x[c] = lo.ln();
                    } else if v > hi {
                        x[c] = hi.ln();
                    }
                }
                Coord::Linear(p) => {
                    x[c] = x[c].clamp(self.lower[p.index(n)], self.upper[p.index(n)]);
                }
                Coord::Stick(_) => x[c] = x[c].clamp(-STICK_LIMIT, STICK_LIMIT),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

/// Deviance contribution of one channel, its derivative in μ, and the
/// expected-information weight (all on the deviance scale).
#[inline]
fn channel_terms(objective: Objective, n: u64, mu: f64) -> (f64, f64, f64) {
    let nf = n as f64;
    match objective {
        Objective::Poisson => {
            if !(mu > 0.0) {
                return if n == 0 && mu == 0.0 { (0.0, 2.0, 0.0) } else { (f64::INFINITY, 0.0, 0.0) };
            }
            let dev = if n == 0 { 2.0 * mu } else { 2.0 * nf * rel_deviance((mu - nf) / nf) };
            (dev, 2.0 * (1.0 - nf / mu), 2.0 / mu)
        }
        Objective::LeastSquares => {
            let w = 1.0 / nf.max(1.0);
            let r = nf - mu;
            (r * r * w, -2.0 * r * w, 2.0 * w)
        }
    }
}

/// `r − ln(1 + r)` without cancellation for small `r`.
#[inline]
fn rel_deviance(r: f64) -> f64 {
    if r.abs() < 1e-2 {
        let r2 = r * r;
        r2 * (0.5 - r / 3.0 + r2 / 4.0 - r2 * r / 5.0 + r2 * r2 / 6.0 - r2 * r2 * r / 7.0)
    } else {
        r - r.ln_1p()
    }
}

struct Block<'a> {
    hist: &'a Histogram,
    layout: Layout,
    /// Local coordinate → global coordinate.
    global: Vec<usize>,
}

impl Block<'_> {
    fn local(&self, xg: &[f64]) -> Vec<f64> {
        self.global.iter().map(|&g| xg[g]).collect()
    }

    fn geom(&self) -> &ChannelGeometry {
        &self.hist.geometry
    }

    fn deviance_at(&self, theta: &[f64], objective: Objective) -> f64 {
        let model = SpectrumModel::from_params(self.layout.n, theta);
        let mut mu = vec![0.0; self.geom().n_channels];
        accumulate(&model, self.geom(), &mut mu, None);
        mu.iter()
            .zip(&self.hist.counts)
            .map(|(&m, &c)| channel_terms(objective, c, m).0)
            .sum()
    }

    /// Expectations and natural Jacobian (column-major) at θ.
    fn expect(&self, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let model = SpectrumModel::from_params(self.layout.n, theta);
        let nch = self.geom().n_channels;
        let mut mu = vec![0.0; nch];
        let mut jac = vec![0.0; nch * self.layout.n_natural()];
        accumulate(&model, self.geom(), &mut mu, Some(&mut jac));
        (mu, jac)
    }

    /// Deviance, gradient and expected information with respect to the columns of `tangent`.
    fn derivatives(&self, theta: &[f64], tangent: &DMatrix<f64>, objective: Objective) -> (f64, DVector<f64>, DMatrix<f64>) {
        let (mu, jac) = self.expect(theta);
        let nch = mu.len();
        let d = tangent.ncols();
        // J_x = J_θ · T, row by row
        let nat = self.layout.n_natural();
        let active: Vec<usize> = (0..nat).filter(|&p| tangent.row(p).iter().any(|&v| v != 0.0)).collect();
        let mut dev = 0.0;
        let mut grad = DVector::zeros(d);
        let mut info = DMatrix::zeros(d, d);
        let mut row = vec![0.0; d];
        for k in 0..nch {
            let (dk, dmu, w) = channel_terms(objective, self.hist.counts[k], mu[k]);
            dev += dk;
            row.iter_mut().for_each(|r| *r = 0.0);
            for &p in &active {
                let j = jac[p * nch + k];
                if j != 0.0 {
                    for (c, r) in row.iter_mut().enumerate() {
                        *r += j * tangent[(p, c)];
                    }
                }
            }
            for a in 0..d {
                grad[a] += dmu * row[a];
                let wa = w * row[a];
                for b in 0..=a {
                    info[(a, b)] += wa * row[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        (dev, grad, info)
    }
}

struct Problem<'a> {
    blocks: Vec<Block<'a>>,
    dim: usize,
    objective: Objective,
}

struct Evaluation {
    deviance: f64,
    gradient: DVector<f64>,
    information: DMatrix<f64>,
}

impl Problem<'_> {
    fn deviance(&self, x: &[f64]) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.deviance_at(&b.layout.to_natural(&b.local(x)), self.objective))
            .sum()
    }

    fn evaluate(&self, x: &[f64]) -> Evaluation {
        let mut ev = Evaluation {
            deviance: 0.0,
            gradient: DVector::zeros(self.dim),
            information: DMatrix::zeros(self.dim, self.dim),
        };
        for b in &self.blocks {
            let xl = b.local(x);
            let theta = b.layout.to_natural(&xl);
            let t = b.layout.tangent(&xl, &theta);
            let (dev, g, h) = b.derivatives(&theta, &t, self.objective);
            ev.deviance += dev;
            scatter(&mut ev, &b.global, &g, &h);
        }
        ev
    }

    /// Gradient and expected information in the linearized natural coordinates.
    fn linear_derivatives(&self, thetas: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let mut ev = Evaluation {
            deviance: 0.0,
            gradient: DVector::zeros(self.dim),
            information: DMatrix::zeros(self.dim, self.dim),
        };
        for (b, theta) in self.blocks.iter().zip(thetas) {
            let a = b.layout.linear_tangent();
            let (_, g, h) = b.derivatives(theta, &a, self.objective);
            scatter(&mut ev, &b.global, &g, &h);
        }
        (ev.gradient, ev.information)
    }

    /// Limits a step: logit moves are clipped to ±2 each (a saturated logit
    /// asks for arbitrarily long moves), then the step is shortened so no
    /// log-scale coordinate changes by more than a factor e^½.
    fn limit_step(&self, delta: &mut DVector<f64>) {
        let mut worst: f64 = 1.0;
        for b in &self.blocks {
            for (l, &g) in b.global.iter().enumerate() {
                match b.layout.coords[l] {
                    Coord::Log(_) => worst = worst.max(delta[g].abs() / 0.5),
                    Coord::Stick(_) => delta[g] = delta[g].clamp(-2.0, 2.0),
                    Coord::Linear(_) => {}
                }
            }
        }
        *delta /= worst;
    }

    /// Matches the predicted total to the observed total through the event
    /// count and background (the exact Poisson solution for an overall scale).
    fn rescale_start(&self, x: &mut [f64]) {
        let mut uses = vec![0usize; self.dim];
        for b in &self.blocks {
            for &g in &b.global {
                uses[g] += 1;
            }
        }
        for b in &self.blocks {
            let theta = b.layout.to_natural(&b.local(x));
            let model = SpectrumModel::from_params(b.layout.n, &theta);
            let mut mu = vec![0.0; b.geom().n_channels];
            accumulate(&model, b.geom(), &mut mu, None);
            let predicted: f64 = mu.iter().sum();
            let scale = b.hist.total() as f64 / predicted;
            if !(scale.is_finite() && scale > 0.0) {
                continue;
            }
            for (l, &g) in b.global.iter().enumerate() {
                if uses[g] != 1 {
                    continue;
                }
                match b.layout.coords[l] {
                    Coord::Log(ModelParam::TotalEvents) => x[g] += scale.ln(),
                    Coord::Linear(ModelParam::Background) => x[g] *= scale,
                    _ => {}
                }
            }
        }
        self.project(x);
    }

    fn pinned(&self, x: &[f64], g: &DVector<f64>) -> Vec<bool> {
        let mut out = vec![false; self.dim];
        for b in &self.blocks {
            let xl = b.local(x);
            for (l, &gi) in b.global.iter().enumerate() {
                if b.layout.at_bound(l, xl[l], g[gi]) {
                    out[gi] = true;
                }
            }
        }
        out
    }

    fn project(&self, x: &mut [f64]) {
        for b in &self.blocks {
            let mut xl = b.local(x);
            b.layout.project(&mut xl);
            for (l, &g) in b.global.iter().enumerate() {
                x[g] = xl[l];
            }
        }
    }
}

fn scatter(ev: &mut Evaluation, global: &[usize], g: &DVector<f64>, h: &DMatrix<f64>) {
    for (a, &ga) in global.iter().enumerate() {
        ev.gradient[ga] += g[a];
        for (b, &gb) in global.iter().enumerate() {
            ev.information[(ga, gb)] += h[(a, b)];
        }
    }
}

/// Largest `|g_j| / sqrt(F_jj)` over coordinates not held at a bound by the
/// gradient (a coordinate at its bound whose descent direction points outward
/// satisfies the first-order conditions).
fn scaled_gradient(problem: &Problem, x: &[f64], ev: &Evaluation) -> f64 {
    let pinned = problem.pinned(x, &ev.gradient);
    (0..ev.gradient.len())
        .filter(|&j| !pinned[j])
        .map(|j| {
            let h = ev.information[(j, j)];
            if h > 0.0 {
                ev.gradient[j].abs() / h.sqrt()
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

struct Settings {
    max_iterations: usize,
    convergence_tol: f64,
    gradient_tol: f64,
}

struct Minimum {
    x: Vec<f64>,
    deviance: f64,
    converged: bool,
    iterations: usize,
    gradient_norm: f64,
    /// Deviance after every accepted step, starting with the initial point.
    trace: Vec<f64>,
}

fn minimize(problem: &Problem, x0: Vec<f64>, s: &Settings) -> Result<Minimum> {
    let mut x = x0;
    problem.project(&mut x);
    let mut ev = problem.evaluate(&x);
    if !ev.deviance.is_finite() {
        return Err(Error::Fit("model predicts zero counts where data are non-zero at the start point".into()));
    }
    let mut trace = vec![ev.deviance];
    let mut damping: f64 = 1e-3;
    let mut last_rel = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let d = problem.dim;
    loop {
        let gnorm = scaled_gradient(problem, &x, &ev);
        if gnorm < s.gradient_tol && (last_rel < s.convergence_tol || d == 0) {
            converged = true;
            break;
        }
        if iterations >= s.max_iterations {
            break;
        }
        iterations += 1;
        // Marquardt step over the coordinates not held at a bound, solved in
        // Jacobi-scaled form so coordinates of very different curvature are
        // treated alike.
        let pinned = problem.pinned(&x, &ev.gradient);
        let active: Vec<usize> = (0..d).filter(|&j| !pinned[j]).collect();
        let m = active.len();
        let scale: Vec<f64> = active
            .iter()
            .map(|&j| {
                let h = ev.information[(j, j)];
                if h > 0.0 { 1.0 / h.sqrt() } else { 1.0 }
            })
            .collect();
        let mut a = DMatrix::from_fn(m, m, |i, k| ev.information[(active[i], active[k])] * scale[i] * scale[k]);
        for i in 0..m {
            a[(i, i)] += damping.max(1e-12);
        }
        let rhs = DVector::from_fn(m, |i, _| -ev.gradient[active[i]] * scale[i]);
        let step = a.cholesky().map(|c| c.solve(&rhs)).map(|y| {
            let mut delta = DVector::zeros(d);
            for (i, &j) in active.iter().enumerate() {
                delta[j] = y[i] * scale[i];
            }
            delta
        });
        let accepted = match step {
            Some(mut delta) => {
                problem.limit_step(&mut delta);
                let mut trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(xi, di)| xi + di).collect();
                problem.project(&mut trial);
                let dev = problem.deviance(&trial);
                if dev.is_finite() && dev <= ev.deviance {
                    last_rel = (ev.deviance - dev) / dev.abs().max(1.0);
                    x = trial;
                    ev = problem.evaluate(&x);
                    trace.push(ev.deviance);
                    true
                } else {
                    false
                }
            }
            None => false,
        };
        if accepted {
            damping = (damping / 10.0).max(1e-12);
        } else {
            damping *= 10.0;
            if damping > 1e14 {
                // No descent direction left at working precision.
                converged = gnorm < s.gradient_tol;
                break;
            }
        }
    }
    Ok(Minimum {
        gradient_norm: scaled_gradient(problem, &x, &ev),
        deviance: ev.deviance,
        x,
        converged,
        iterations,
        trace,
    })
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

/// Which curvature matrix produced the covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InformationStatus {
    Observed,
    /// Observed information was not positive definite; expected information used.
    ExpectedFallback,
    /// Neither matrix could be inverted; covariance entries are NaN.
    Singular,
    /// Nothing was varied.
    NotApplicable,
}

impl InformationStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Observed => "observed",
            Self::ExpectedFallback => "expected_fallback",
            Self::Singular => "singular",
            Self::NotApplicable => "not_applicable",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub n_components: usize,
    /// Natural parameters in [`ModelParam`] order; rates in `rate_unit`.
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Covariance of `estimates` (zero rows for fixed parameters).
    pub covariance: DMatrix<f64>,
    /// Parameters that moved during the fit (free, including the dependent remainder fraction).
    pub varied: Vec<bool>,
    pub rate_unit: RateUnit,
    pub deviance: f64,
    pub degrees_of_freedom: i64,
    pub converged: bool,
    pub n_iterations: usize,
    pub gradient_norm: f64,
    pub information: InformationStatus,
    /// Channel expectations at the estimate.
    pub expected: Vec<f64>,
    /// Deviance after each accepted optimizer step.
    pub deviance_trace: Vec<f64>,
}

impl FitResult {
    pub fn get(&self, p: ModelParam) -> f64 {
        self.estimates[p.index(self.n_components)]
    }

    pub fn std_error(&self, p: ModelParam) -> f64 {
        self.std_errors[p.index(self.n_components)]
    }

    pub fn names(&self) -> Vec<String> {
        ModelParam::all(self.n_components).map(ModelParam::name).collect()
    }

    /// Fitted model with rates in μs⁻¹.
    pub fn model(&self) -> SpectrumModel {
        let f = self.rate_unit.to_per_us();
        let mut p = self.estimates.clone();
        for v in p.iter_mut().take(self.n_components) {
            *v *= f;
        }
        SpectrumModel::from_params(self.n_components, &p)
    }

    /// `estimates` with rates expressed in `unit`.
    pub fn estimates_in(&self, unit: RateUnit) -> Vec<f64> {
        let scale = self.rate_unit.to_per_us() / unit.to_per_us();
        let mut p = self.estimates.clone();
        for v in p.iter_mut().take(self.n_components) {
            *v *= scale;
        }
        p
    }

    pub fn covariance_psd(&self, tol: f64) -> bool {
        let sym = (&self.covariance - self.covariance.transpose()).abs().max() <= tol * self.covariance.abs().max().max(1e-300);
        let eig = self.covariance.clone().symmetric_eigenvalues();
        let scale = eig.abs().max();
        sym && eig.iter().all(|&e| e >= -tol * scale.max(1e-300))
    }
}

/// Simultaneous fit of several histograms.
#[derive(Debug, Clone)]
pub struct JointFit {
    pub fits: Vec<FitResult>,
    pub deviance: f64,
    pub degrees_of_freedom: i64,
    pub converged: bool,
    pub n_iterations: usize,
}

fn check_histogram(h: &Histogram) -> Result<()> {
    h.geometry.validate()?;
    if h.total() == 0 {
        return Err(Error::Fit("histogram has no counts".into()));
    }
    Ok(())
}

/// Fits one histogram.
pub fn fit_mle(h: &Histogram, spec: &FitSpec) -> Result<FitResult> {
    let mut joint = fit_joint(&[h], std::slice::from_ref(spec), &[])?;
    Ok(joint.fits.remove(0))
}

/// Fits several histograms at once; each parameter in `shared` is a single
/// coordinate common to all of them. A shared fraction must be free in every
/// spec and the fixed fractions must leave the same mass in each.
pub fn fit_joint(hists: &[&Histogram], specs: &[FitSpec], shared: &[ModelParam]) -> Result<JointFit> {
    if hists.is_empty() || hists.len() != specs.len() {
        return Err(domain("need one fit spec per histogram"));
    }
    let lead = shared.iter().copied().find(|p| p.is_fraction());
    if shared.iter().filter(|p| p.is_fraction()).count() > 1 {
        return Err(domain("at most one fraction can be shared"));
    }
    let mut blocks = Vec::with_capacity(hists.len());
    let mut x0 = Vec::new();
    let mut shared_slots: Vec<(ModelParam, usize, usize)> = Vec::new(); // (param, global, count)
    for (h, spec) in hists.iter().zip(specs) {
        check_histogram(h)?;
        if let Some(first) = blocks.first() {
            let first: &Block = first;
            if first.geom() != &h.geometry {
                return Err(Error::Geometry("histograms in a joint fit must share geometry".into()));
            }
        }
        let (layout, xl) = Layout::new(spec, lead)?;
        let mut global = Vec::with_capacity(layout.dim());
        for c in 0..layout.dim() {
            let tag = layout.tag(c);
            let is_shared = shared.contains(&tag)
                && (!tag.is_fraction() || matches!(layout.coords[c], Coord::Stick(0)));
            if is_shared {
                if let Some(slot) = shared_slots.iter_mut().find(|s| s.0 == tag) {
                    x0[slot.1] += xl[c];
                    slot.2 += 1;
                    global.push(slot.1);
                    continue;
                }
                shared_slots.push((tag, x0.len(), 1));
            }
            global.push(x0.len());
            x0.push(xl[c]);
        }
        blocks.push(Block { hist: h, layout, global });
    }
    for &p in shared {
        match shared_slots.iter().find(|s| s.0 == p) {
            Some(&(_, _, count)) if count == hists.len() => {}
            _ => {
                return Err(domain(format!(
                    "shared parameter {} must be free (and independent) in every spec",
                    p.name()
                )))
            }
        }
    }
    if lead.is_some() {
        let m0 = blocks[0].layout.mass;
        if blocks.iter().any(|b| (b.layout.mass - m0).abs() > 1e-12) {
            return Err(domain("shared fraction needs identical fixed fractions in every spec"));
        }
    }
    for (_, g, count) in &shared_slots {
        x0[*g] /= *count as f64;
    }

    let objective = specs[0].objective;
    let problem = Problem { dim: x0.len(), blocks, objective };
    let settings = Settings {
        max_iterations: specs.iter().map(|s| s.max_iterations).max().unwrap_or(0),
        convergence_tol: specs.iter().map(|s| s.convergence_tol).fold(f64::INFINITY, f64::min),
        gradient_tol: specs.iter().map(|s| s.gradient_tol).fold(f64::INFINITY, f64::min),
    };
    problem.rescale_start(&mut x0);
    let min = minimize(&problem, x0, &settings)?;
    Ok(assemble(&problem, &min, specs))
}

fn assemble(problem: &Problem, min: &Minimum, specs: &[FitSpec]) -> JointFit {
    let thetas: Vec<Vec<f64>> = problem
        .blocks
        .iter()
        .map(|b| b.layout.to_natural(&b.local(&min.x)))
        .collect();
    let (cov_xi, status) = covariance(problem, &thetas);

    let mut fits = Vec::with_capacity(problem.blocks.len());
    let mut dof_total = 0;
    for ((b, theta), spec) in problem.blocks.iter().zip(&thetas).zip(specs) {
        let n = b.layout.n;
        let a = b.layout.linear_tangent();
        // Rows of the global covariance belonging to this block.
        let d = b.layout.dim();
        let mut local_cov = DMatrix::zeros(d, d);
        for (i, &gi) in b.global.iter().enumerate() {
            for (j, &gj) in b.global.iter().enumerate() {
                local_cov[(i, j)] = cov_xi[(gi, gj)];
            }
        }
        let mut cov = &a * local_cov * a.transpose();
        let unit = b.layout.rate_factor;
        let mut estimates = theta.clone();
        for i in 0..n {
            estimates[i] /= unit;
            for j in 0..cov.ncols() {
                cov[(i, j)] /= unit;
                cov[(j, i)] /= unit;
            }
        }
        let std_errors = (0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
        let varied = (0..b.layout.n_natural()).map(|p| a.row(p).iter().any(|&v| v != 0.0)).collect();
        let model = SpectrumModel::from_params(n, theta);
        let mut expected = vec![0.0; b.geom().n_channels];
        accumulate(&model, b.geom(), &mut expected, None);
        let dof = b.geom().n_channels as i64 - d as i64;
        dof_total += dof;
        fits.push(FitResult {
            n_components: n,
            estimates,
            std_errors,
            covariance: cov,
            varied,
            rate_unit: spec.rate_unit,
            deviance: b.deviance_at(theta, problem.objective),
            degrees_of_freedom: dof,
            converged: min.converged,
            n_iterations: min.iterations,
            gradient_norm: min.gradient_norm,
            information: status,
            expected,
            deviance_trace: min.trace.clone(),
        });
    }
    // Shared coordinates were counted once per block.
    let shared_extra: i64 = problem.blocks.iter().map(|b| b.layout.dim() as i64).sum::<i64>() - problem.dim as i64;
    JointFit {
        fits,
        deviance: min.deviance,
        degrees_of_freedom: dof_total + shared_extra,
        converged: min.converged,
        n_iterations: min.iterations,
    }
}

/// Inverse information in the linearized coordinates.
fn covariance(problem: &Problem, thetas: &[Vec<f64>]) -> (DMatrix<f64>, InformationStatus) {
    let d = problem.dim;
    if d == 0 {
        return (DMatrix::zeros(0, 0), InformationStatus::NotApplicable);
    }
    let (_, expected) = problem.linear_derivatives(thetas);
    // Observed information: central differences of the analytic gradient.
    let mut observed = DMatrix::zeros(d, d);
    for j in 0..d {
        let fisher = expected[(j, j)];
        let mut scale = 0.0f64;
        for (b, th) in problem.blocks.iter().zip(thetas) {
            let a = b.layout.linear_tangent();
            for (l, _) in b.global.iter().enumerate().filter(|(_, &g)| g == j) {
                for p in (0..a.nrows()).filter(|&p| a[(p, l)] == 1.0) {
                    scale = scale.max(th[p].abs());
                }
            }
        }
        // ~1e-3 standard errors, but never below the parameter's rounding scale
        let h = if fisher > 0.0 { 1e-3 * (2.0 / fisher).sqrt() } else { 1e-6 * scale.max(1.0) };
        let h = h.max(1e-9 * scale);
        let shifted = |sign: f64| -> Vec<Vec<f64>> {
            problem
                .blocks
                .iter()
                .zip(thetas)
                .map(|(b, th)| {
                    let a = b.layout.linear_tangent();
                    let mut t = th.clone();
                    for (l, &g) in b.global.iter().enumerate() {
                        if g == j {
                            for p in 0..t.len() {
                                t[p] += sign * h * a[(p, l)];
                            }
                        }
                    }
                    t
                })
                .collect()
        };
        let (gp, _) = problem.linear_derivatives(&shifted(1.0));
        let (gm, _) = problem.linear_derivatives(&shifted(-1.0));
        for i in 0..d {
            observed[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    // deviance scale → information scale (−log L) is a factor one half
    let observed = (&observed + observed.transpose()) * 0.25;
    let expected = expected * 0.5;
    if let Some(inv) = spd_inverse(&observed) {
        return (inv, InformationStatus::Observed);
    }
    if let Some(inv) = spd_inverse(&expected) {
        return (inv, InformationStatus::ExpectedFallback);
    }
    (DMatrix::from_element(d, d, f64::NAN), InformationStatus::Singular)
}

fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    // Symmetric diagonal scaling keeps parameters of very different size well conditioned.
    let d = m.nrows();
    let s: Vec<f64> = (0..d).map(|i| m[(i, i)]).collect();
    if s.iter().any(|&v| !(v > 0.0)) {
        return None;
    }
    let scaled = DMatrix::from_fn(d, d, |i, j| m[(i, j)] / (s[i] * s[j]).sqrt());
    let inv = scaled.cholesky()?.inverse();
    let out = DMatrix::from_fn(d, d, |i, j| inv[(i, j)] / (s[i] * s[j]).sqrt());
    let cond_ok = out.iter().all(|v| v.is_finite());
    cond_ok.then_some(out)
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

/// Default pass threshold for [`gradient_check`].
pub const GRADIENT_CHECK_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_deviation: f64,
    /// Parameter with the largest deviation.
    pub worst: Option<String>,
    pub per_parameter: Vec<(String, f64)>,
}

impl GradientCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_deviation <= tol
    }

    /// Names the offending parameter when the check fails.
    pub fn diagnostic(&self, tol: f64) -> Option<String> {
        (!self.passes(tol)).then(|| {
            format!(
                "analytic Jacobian deviates from finite differences by {:.3e} (> {tol:.1e}) for {}",
                self.max_deviation,
                self.worst.as_deref().unwrap_or("?")
            )
        })
    }
}

/// Compares the analytic Jacobian of the channel expectations with central
/// finite differences at the spec's initial point, for every free natural
/// parameter. Deviations are relative to the largest entry of each column.
pub fn gradient_check(spec: &FitSpec, h: &Histogram) -> Result<GradientCheck> {
    spec.validate()?;
    h.geometry.validate()?;
    let n = spec.n_components();
    let theta = spec.natural_values();
    let geom = h.geometry;
    let nch = geom.n_channels;
    let eval = |t: &[f64]| {
        let mut mu = vec![0.0; nch];
        accumulate(&SpectrumModel::from_params(n, t), &geom, &mut mu, None);
        mu
    };
    let model = SpectrumModel::from_params(n, &theta);
    model.validate()?;
    let mut jac = vec![0.0; nch * theta.len()];
    let mut mu = vec![0.0; nch];
    accumulate(&model, &geom, &mut mu, Some(&mut jac));

    let mut per_parameter = Vec::new();
    for p in ModelParam::all(n).filter(|p| spec.param(*p).free) {
        let i = p.index(n);
        let step = 1e-6 * theta[i].abs().max(1.0);
        let (mut up, mut down) = (theta.clone(), theta.clone());
        up[i] += step;
        down[i] -= step;
        if up[i] == theta[i] || down[i] == theta[i] || !up[i].is_finite() || !down[i].is_finite() {
            return Err(domain(format!("finite-difference step is not representable for {}", p.name())));
        }
        let (fu, fd) = (eval(&up), eval(&down));
        let h2 = up[i] - down[i];
        let column = &jac[i * nch..(i + 1) * nch];
        let scale = column.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let worst = column
            .iter()
            .zip(fu.iter().zip(&fd))
            .map(|(&a, (&u, &d))| (a - (u - d) / h2).abs())
            .fold(0.0, f64::max);
        let dev = if scale > 0.0 { worst / scale } else if worst == 0.0 { 0.0 } else { f64::INFINITY };
        per_parameter.push((p.name(), dev));
    }
    let (worst, max_deviation) = per_parameter
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, d)| (Some(n.clone()), *d))
        .unwrap_or((None, 0.0));
    Ok(GradientCheck { max_deviation, worst, per_parameter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decay::{DecayComponent, InstrumentResponse};

    fn model() -> SpectrumModel {
        SpectrumModel {
            components: vec![
                DecayComponent { rate: 7989.6, intensity: 0.05 },
                DecayComponent { rate: 50.0, intensity: 0.65 },
                DecayComponent { rate: 7.039979, intensity: 0.30 },
            ],
            irf: InstrumentResponse { fwhm: 1.7, t0: 50.0 },
            prompt_fraction: 0.0,
            background_per_channel: 5.0,
            total_events: 1e6,
        }
    }

    #[test]
    fn layout_round_trip_and_simplex() {
        let mut m = model();
        m.prompt_fraction = 0.1;
        m.components[1].intensity = 0.55;
        let spec = FitSpec::from_model(&m);
        let (layout, x0) = Layout::new(&spec, None).unwrap();
        let theta = layout.to_natural(&x0);
        for (a, b) in theta.iter().zip(m.to_params()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
        let x1: Vec<f64> = x0.iter().map(|v| v + 0.3).collect();
        let t1 = layout.to_natural(&x1);
        let sum: f64 = (0..3).map(|i| t1[3 + i]).sum::<f64>() + t1[6];
        assert!((sum - 1.0).abs() < 1e-14);
        assert_eq!(t1[3], 0.05);
    }

    #[test]
    fn tangent_matches_finite_differences() {
        let mut m = model();
        m.prompt_fraction = 0.1;
        m.components[1].intensity = 0.55;
        let spec = FitSpec::from_model(&m);
        let (layout, x0) = Layout::new(&spec, Some(ModelParam::Intensity(2))).unwrap();
        let theta = layout.to_natural(&x0);
        let t = layout.tangent(&x0, &theta);
        for c in 0..layout.dim() {
            let h = 1e-6;
            let mut up = x0.clone();
            let mut dn = x0.clone();
            up[c] += h;
            dn[c] -= h;
            let (tu, td) = (layout.to_natural(&up), layout.to_natural(&dn));
            for p in 0..theta.len() {
                let fd = (tu[p] - td[p]) / (2.0 * h);
                assert!((fd - t[(p, c)]).abs() <= 1e-6 * fd.abs().max(1e-3), "p {p} c {c}: {fd} vs {}", t[(p, c)]);
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = FitSpec::from_model(&model());
        spec.t0.lower = 60.0;
        assert!(spec.validate().is_err());
        let mut spec = FitSpec::from_model(&model());
        spec.intensities.pop();
        assert!(spec.validate().is_err());
        let mut spec = FitSpec::from_model(&model());
        spec.fix(ModelParam::Intensity(1), 0.99);
        spec.fix(ModelParam::Intensity(2), 0.3);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn rate_unit_conversion() {
        let spec = FitSpec::from_model(&model()).with_rate_unit(RateUnit::PerNanosecond);
        assert!((spec.rates[2].value - 7.039979e-3).abs() < 1e-15);
        let back = spec.initial_model();
        assert!((back.components[2].rate - 7.039979).abs() < 1e-12);
    }

    #[test]
    fn n_varied_counts_simplex_once() {
        let spec = FitSpec::from_model(&model());
        // rates 1,2 + sticks (I2, I1, prompt → 2) + t0, fwhm, bkg, total
        assert_eq!(spec.n_varied(), 8);
    }

    #[test]
    fn all_fixed_gradient_check_is_empty() {
        let mut spec = FitSpec::from_model(&model());
        spec.fix_all();
        let h = Histogram::zeros(ChannelGeometry::default(), 1.0);
        let g = gradient_check(&spec, &h).unwrap();
        assert_eq!(g.max_deviation, 0.0);
        assert!(g.per_parameter.is_empty());
        assert!(g.worst.is_none());
    }

    #[test]
    fn channel_terms_poisson() {
        let (d, g, w) = channel_terms(Objective::Poisson, 0, 2.0);
        assert_eq!((d, g, w), (4.0, 2.0, 1.0));
        let (d, g, _) = channel_terms(Objective::Poisson, 5, 5.0);
        assert_eq!((d, g), (0.0, 0.0));
        assert!(channel_terms(Objective::Poisson, 3, 0.0).0.is_infinite());
    }
}
