//! Monte Carlo model of a fast-slow γ_n–γ_a delayed-coincidence spectrometer.
//!
//! A start (birth γ) opens the time-to-amplitude conversion; the stop detector
//! sees an annihilation quantum whose deposited energy must fall inside the
//! differential-discriminator window. Accepted delays are binned by the
//! multichannel analyser. Accidental coincidences surviving the slow channel
//! arrive uniformly in time at a configured residual rate.
//!
//! Every run is split into fixed-size chunks whose random streams are disjoint
//! slices of one ChaCha8 stream, so results never depend on thread count.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decay::{expected_counts, SpectrumModel, FRACTION_SUM_TOL, NS_PER_US};
use crate::error::{domain, Result};
use crate::histogram::{ChannelGeometry, Histogram};
use crate::special::FWHM_PER_SIGMA;

/// Energy of the full two-quantum annihilation deposit, MeV.
pub const FULL_QUANTUM_MEV: f64 = 1.022;

/// Component indices of the standard three-component positron model.
pub const PARA_POSITRONIUM: usize = 0;
pub const FREE_POSITRON: usize = 1;
pub const ORTHO_POSITRONIUM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrometerConfig {
    /// Start quantum energy, MeV.
    pub start_energy: f64,
    /// Stop discriminator window `[low, high]`, MeV.
    pub stop_window: [f64; 2],
    /// Fast timing resolution (FWHM), ns.
    pub timing_fwhm: f64,
    /// Slow coincidence resolving time, μs.
    pub slow_resolving_time: f64,
    /// Residual accidental coincidences per second of live time.
    pub accidental_rate: f64,
    /// ns.
    pub channel_width: f64,
    pub n_channels: usize,
    /// s.
    pub live_time: f64,
    /// Start–stop pairs generated per second.
    pub source_activity: f64,
    /// Range of the flat Compton deposit left by an annihilation quantum, MeV.
    pub compton_range: [f64; 2],
    /// Probability that the stop detector absorbs the full 1.022 MeV quantum.
    pub full_quantum_fraction: f64,
}

impl Default for SpectrometerConfig {
    fn default() -> Self {
        Self {
            start_energy: 1.28,
            stop_window: [0.34, 0.51],
            timing_fwhm: 1.7,
            slow_resolving_time: 1.0,
            accidental_rate: 20.0,
            channel_width: 0.5,
            n_channels: 4096,
            live_time: 1000.0,
            source_activity: 3000.0,
            compton_range: [0.0, 0.511],
            full_quantum_fraction: 0.01,
        }
    }
}

impl SpectrometerConfig {
    pub fn validate(&self) -> Result<()> {
        let [low, high] = self.stop_window;
        if !(low > 0.0 && low < high && high.is_finite()) {
            return Err(domain(format!("stop window needs 0 < low < high, got [{low}, {high}]")));
        }
        if self.start_energy >= low && self.start_energy <= high {
            return Err(domain(format!(
                "start energy {} MeV falls inside the stop window",
                self.start_energy
            )));
        }
        for (name, v) in [
            ("start_energy", self.start_energy),
            ("timing_fwhm", self.timing_fwhm),
            ("slow_resolving_time", self.slow_resolving_time),
            ("channel_width", self.channel_width),
            ("live_time", self.live_time),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(domain(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("accidental_rate", self.accidental_rate), ("source_activity", self.source_activity)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(domain(format!("{name} must be >= 0, got {v}")));
            }
        }
        let [clo, chi] = self.compton_range;
        if !(clo >= 0.0 && clo < chi && chi.is_finite()) {
            return Err(domain(format!("compton range needs 0 <= low < high, got [{clo}, {chi}]")));
        }
        if !(0.0..=1.0).contains(&self.full_quantum_fraction) {
            return Err(domain("full_quantum_fraction must lie in [0, 1]"));
        }
        self.geometry().validate()
    }

    pub fn geometry(&self) -> ChannelGeometry {
        ChannelGeometry { channel_width: self.channel_width, n_channels: self.n_channels }
    }

    pub fn timing_sigma(&self) -> f64 {
        self.timing_fwhm / FWHM_PER_SIGMA
    }

    /// Differential-discriminator decision on a stop deposit.
    pub fn stop_accepts(&self, deposit: f64) -> bool {
        deposit >= self.stop_window[0] && deposit <= self.stop_window[1]
    }

    /// Probability that a true coincidence passes the stop discriminator.
    pub fn acceptance(&self) -> f64 {
        let [clo, chi] = self.compton_range;
        let [wlo, whi] = self.stop_window;
        let overlap = (chi.min(whi) - clo.max(wlo)).max(0.0);
        let compton = (1.0 - self.full_quantum_fraction) * overlap / (chi - clo);
        let full = if self.stop_accepts(FULL_QUANTUM_MEV) { self.full_quantum_fraction } else { 0.0 };
        compton + full
    }

    /// Expected generated start–stop pairs over the live time.
    pub fn expected_generated(&self) -> f64 {
        self.source_activity * self.live_time
    }

    /// Expected accidental coincidences per channel.
    pub fn background_per_channel(&self) -> f64 {
        self.accidental_rate * self.live_time / self.n_channels as f64
    }

    /// The model the recorded histogram should follow: timing width from the
    /// instrument, event total scaled by acceptance, accidental floor added.
    pub fn expected_model(&self, physics: &SpectrumModel) -> SpectrumModel {
        let mut m = physics.clone();
        m.irf.fwhm = self.timing_fwhm;
        m.total_events = self.expected_generated() * self.acceptance();
        m.background_per_channel = self.background_per_channel();
        m
    }

    /// Sets `source_activity` so that `accepted` true events are expected.
    pub fn with_accepted_events(mut self, accepted: f64) -> Self {
        self.source_activity = accepted / (self.acceptance() * self.live_time);
        self
    }

    pub(crate) fn describe(&self, meta: &mut BTreeMap<String, String>) {
        let mut put = |k: &str, v: String| {
            meta.insert(format!("spectrometer.{k}"), v);
        };
        put("start_energy", self.start_energy.to_string());
        put("stop_window", pair(self.stop_window));
        put("timing_fwhm", self.timing_fwhm.to_string());
        put("slow_resolving_time", self.slow_resolving_time.to_string());
        put("accidental_rate", self.accidental_rate.to_string());
        put("source_activity", self.source_activity.to_string());
        put("compton_range", pair(self.compton_range));
        put("full_quantum_fraction", self.full_quantum_fraction.to_string());
    }
}

fn pair(p: [f64; 2]) -> String {
    format!("{},{}", p[0], p[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    StandardQed,
    Resonance,
    NonresonanceLambda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldOrientation {
    None,
    Perpendicular,
    Parallel,
}

impl ExperimentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::StandardQed => "standard_qed",
            Self::Resonance => "resonance",
            Self::NonresonanceLambda => "nonresonance_lambda",
        }
    }
}

impl FieldOrientation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Perpendicular => "perpendicular",
            Self::Parallel => "parallel",
        }
    }
}

/// How the predicted o-Ps anomalies map onto observable model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyScenario {
    pub mode: ExperimentMode,
    pub field_orientation: FieldOrientation,
    /// Fraction of the o-Ps intensity moved into the prompt peak.
    #[serde(default = "default_transfer")]
    pub doubling_transfer: f64,
    /// Relative o-Ps rate excess δ.
    #[serde(default = "default_shift")]
    pub lambda_shift: f64,
    /// Measured parallel/perpendicular ratio, kept for reporting only.
    #[serde(default = "default_factor")]
    pub comparative_factor: f64,
    #[serde(default = "default_factor_err")]
    pub comparative_factor_uncertainty: f64,
}

fn default_transfer() -> f64 {
    0.5
}
fn default_shift() -> f64 {
    0.0019
}
fn default_factor() -> f64 {
    1.85
}
fn default_factor_err() -> f64 {
    0.1
}

impl Default for AnomalyScenario {
    fn default() -> Self {
        Self::new(ExperimentMode::StandardQed, FieldOrientation::None)
    }
}

impl AnomalyScenario {
    pub fn new(mode: ExperimentMode, field_orientation: FieldOrientation) -> Self {
        Self {
            mode,
            field_orientation,
            doubling_transfer: default_transfer(),
            lambda_shift: default_shift(),
            comparative_factor: default_factor(),
            comparative_factor_uncertainty: default_factor_err(),
        }
    }

    pub fn with_orientation(mut self, field_orientation: FieldOrientation) -> Self {
        self.field_orientation = field_orientation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.doubling_transfer) {
            return Err(domain(format!(
                "doubling_transfer must lie in [0, 1], got {}",
                self.doubling_transfer
            )));
        }
        if !(self.lambda_shift.is_finite() && self.lambda_shift >= 0.0) {
            return Err(domain(format!("lambda_shift must be >= 0, got {}", self.lambda_shift)));
        }
        Ok(())
    }

    /// The anomaly is suppressed by a field parallel to gravity.
    pub fn anomaly_active(&self) -> bool {
        self.mode != ExperimentMode::StandardQed && self.field_orientation != FieldOrientation::Parallel
    }

    /// Delayed o-Ps intensity ratio parallel/anomalous in resonance mode.
    pub fn expected_doubling_ratio(&self) -> f64 {
        1.0 / (1.0 - self.doubling_transfer)
    }

    pub(crate) fn describe(&self, meta: &mut BTreeMap<String, String>) {
        meta.insert("scenario.mode".into(), self.mode.as_str().into());
        meta.insert("scenario.field_orientation".into(), self.field_orientation.as_str().into());
        meta.insert("scenario.doubling_transfer".into(), self.doubling_transfer.to_string());
        meta.insert("scenario.lambda_shift".into(), self.lambda_shift.to_string());
    }
}

/// Maps the true three-component model onto what the scenario predicts is observed.
pub fn apply_scenario(base: &SpectrumModel, s: &AnomalyScenario) -> Result<SpectrumModel> {
    s.validate()?;
    base.validate()?;
    if base.n_components() != 3 {
        return Err(domain(format!(
            "scenarios act on a three-component model, got {} components",
            base.n_components()
        )));
    }
    let mut out = base.clone();
    if !s.anomaly_active() {
        return Ok(out);
    }
    let ops = &mut out.components[ORTHO_POSITRONIUM];
    match s.mode {
        ExperimentMode::Resonance => {
            let moved = s.doubling_transfer * ops.intensity;
            ops.intensity -= moved;
            out.prompt_fraction += moved;
        }
        ExperimentMode::NonresonanceLambda => ops.rate *= 1.0 + s.lambda_shift,
        ExperimentMode::StandardQed => unreachable!(),
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Event-level sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventChannel {
    /// Decay component by index (see [`PARA_POSITRONIUM`] and friends).
    Decay(usize),
    PromptTransfer,
    Accidental,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub true_channel: EventChannel,
    /// ns after t0.
    pub emission_delay: f64,
    /// ns on the analyser axis.
    pub measured_delay: f64,
    /// MeV.
    pub stop_energy_deposit: f64,
    pub accepted: bool,
}

/// Random stream identity: `(seed, stream_id)` fixes the whole event sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RngSeed {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngSeed {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }
}

/// Words of ChaCha output reserved per chunk; far above what a chunk draws.
const CHUNK_WORDS: u128 = 1 << 36;
/// Expected generated events per chunk.
const CHUNK_EVENTS: f64 = 262_144.0;
const ACCIDENTAL_BLOCK: u64 = 1 << 31;
const BINNED_BLOCK: u64 = 1 << 30;

/// Generator positioned at the start of `chunk` within the stream.
pub fn chunk_rng(seed: RngSeed, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.seed);
    rng.set_stream(seed.stream_id);
    rng.set_word_pos(chunk as u128 * CHUNK_WORDS);
    rng
}

/// Precomputed sampling tables for one (config, model) pair.
#[derive(Debug, Clone)]
pub struct EventSampler<'a> {
    cfg: &'a SpectrometerConfig,
    cumulative: Vec<f64>,
    decays: Vec<Exp<f64>>,
    jitter: Normal<f64>,
    t0: f64,
}

impl<'a> EventSampler<'a> {
    pub fn new(cfg: &'a SpectrometerConfig, model: &SpectrumModel) -> Result<Self> {
        model.validate()?;
        let sum = model.fraction_sum();
        if (sum - 1.0).abs() > FRACTION_SUM_TOL {
            return Err(domain(format!("model must be normalized, fractions sum to {sum}")));
        }
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = model
            .components
            .iter()
            .map(|c| {
                acc += c.intensity;
                acc
            })
            .collect();
        cumulative.push(1.0);
        let decays = model
            .components
            .iter()
            .map(|c| Exp::new(c.rate / NS_PER_US).map_err(|e| domain(e.to_string())))
            .collect::<Result<_>>()?;
        let jitter = Normal::new(0.0, cfg.timing_sigma()).map_err(|e| domain(e.to_string()))?;
        Ok(Self { cfg, cumulative, decays, jitter, t0: model.irf.t0 })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> EventRecord {
        let u: f64 = rng.random();
        let slot = self.cumulative.iter().position(|&c| u < c).unwrap_or(self.cumulative.len() - 1);
        let (true_channel, emission_delay) = if slot < self.decays.len() {
            (EventChannel::Decay(slot), self.decays[slot].sample(rng))
        } else {
            (EventChannel::PromptTransfer, 0.0)
        };
        let measured_delay = self.t0 + emission_delay + self.jitter.sample(rng);
        let deposit = if rng.random::<f64>() < self.cfg.full_quantum_fraction {
            FULL_QUANTUM_MEV
        } else {
            let [lo, hi] = self.cfg.compton_range;
            rng.random_range(lo..hi)
        };
        EventRecord {
            true_channel,
            emission_delay,
            measured_delay,
            stop_energy_deposit: deposit,
            accepted: self.cfg.stop_accepts(deposit),
        }
    }
}

/// Draws one true start–stop event.
pub fn sample_event<R: Rng + ?Sized>(
    cfg: &SpectrometerConfig,
    model: &SpectrumModel,
    rng: &mut R,
) -> Result<EventRecord> {
    Ok(EventSampler::new(cfg, model)?.sample(rng))
}

/// Draws one accidental coincidence: uniform on the analyser axis, with a
/// stop deposit that already passed the slow channel.
pub fn sample_accidental<R: Rng + ?Sized>(cfg: &SpectrometerConfig, rng: &mut R) -> EventRecord {
    let t = rng.random_range(0.0..cfg.geometry().span());
    let [lo, hi] = cfg.stop_window;
    EventRecord {
        true_channel: EventChannel::Accidental,
        emission_delay: t,
        measured_delay: t,
        stop_energy_deposit: rng.random_range(lo..=hi),
        accepted: true,
    }
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
}

// ---------------------------------------------------------------------------
// Histogram generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulationMethod {
    /// Event-by-event through the discriminator chain.
    #[default]
    Events,
    /// Independent Poisson draws around the expected channel contents.
    Binned,
}

impl SimulationMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Events => "events",
            Self::Binned => "binned",
        }
    }
}

#[derive(Debug, Default)]
struct Tally {
    counts: Vec<u64>,
    generated: u64,
    accepted: u64,
    out_of_range: u64,
    accidentals: u64,
}

impl Tally {
    fn new(n: usize) -> Self {
        Self { counts: vec![0; n], ..Default::default() }
    }

    fn absorb(mut self, other: Tally) -> Tally {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        self.generated += other.generated;
        self.accepted += other.accepted;
        self.out_of_range += other.out_of_range;
        self.accidentals += other.accidentals;
        self
    }
}

fn chunk_means(total: f64) -> Vec<f64> {
    if total <= 0.0 {
        return Vec::new();
    }
    let n = (total / CHUNK_EVENTS).ceil().max(1.0) as usize;
    let mut means = vec![CHUNK_EVENTS; n];
    means[n - 1] = total - CHUNK_EVENTS * (n - 1) as f64;
    means
}

fn check_inputs(cfg: &SpectrometerConfig, model: &SpectrumModel) -> Result<()> {
    cfg.validate()?;
    let t0 = model.irf.t0;
    if !(t0 >= 0.0 && t0 < cfg.geometry().span()) {
        return Err(domain(format!(
            "channel range [0, {}) ns does not cover t0 = {t0} ns",
            cfg.geometry().span()
        )));
    }
    Ok(())
}

/// Simulates one histogram event by event.
pub fn simulate_spectrum(
    cfg: &SpectrometerConfig,
    scenario: &AnomalyScenario,
    base: &SpectrumModel,
    seed: RngSeed,
) -> Result<Histogram> {
    simulate_with(cfg, scenario, base, seed, SimulationMethod::Events)
}

/// Simulates one histogram with the chosen method.
pub fn simulate_with(
    cfg: &SpectrometerConfig,
    scenario: &AnomalyScenario,
    base: &SpectrumModel,
    seed: RngSeed,
    method: SimulationMethod,
) -> Result<Histogram> {
    check_inputs(cfg, base)?;
    let model = apply_scenario(base, scenario)?;
    let geom = cfg.geometry();
    let n = geom.n_channels;

    let tally = match method {
        SimulationMethod::Events => {
            let sampler = EventSampler::new(cfg, &model)?;
            let true_chunks = chunk_means(cfg.expected_generated());
            let acc_chunks = chunk_means(cfg.accidental_rate * cfg.live_time);
            let jobs: Vec<(bool, u64, f64)> = true_chunks
                .iter()
                .enumerate()
                .map(|(c, &m)| (false, c as u64, m))
                .chain(acc_chunks.iter().enumerate().map(|(c, &m)| (true, ACCIDENTAL_BLOCK + c as u64, m)))
                .collect();
            jobs.into_par_iter()
                .map(|(accidental, chunk, mean)| {
                    let mut rng = chunk_rng(seed, chunk);
                    let mut t = Tally::new(n);
                    let count = poisson(mean, &mut rng);
                    for _ in 0..count {
                        let ev = if accidental {
                            t.accidentals += 1;
                            sample_accidental(cfg, &mut rng)
                        } else {
                            t.generated += 1;
                            sampler.sample(&mut rng)
                        };
                        if !ev.accepted {
                            continue;
                        }
                        if !accidental {
                            t.accepted += 1;
                        }
                        match geom.channel_of(ev.measured_delay) {
                            Some(k) => t.counts[k] += 1,
                            None => t.out_of_range += 1,
                        }
                    }
                    t
                })
                .reduce(|| Tally::new(n), Tally::absorb)
        }
        SimulationMethod::Binned => {
            let expected = expected_counts(&cfg.expected_model(&model), &geom)?;
            let mut rng = chunk_rng(seed, BINNED_BLOCK);
            let mut t = Tally::new(n);
            for (c, &mu) in t.counts.iter_mut().zip(&expected) {
                *c = poisson(mu, &mut rng);
            }
            t
        }
    };

    let mut h = Histogram::from_counts(geom, tally.counts, cfg.live_time)?;
    let meta = &mut h.metadata;
    meta.insert("seed".into(), seed.seed.to_string());
    meta.insert("stream_id".into(), seed.stream_id.to_string());
    meta.insert("method".into(), method.as_str().into());
    cfg.describe(meta);
    scenario.describe(meta);
    describe_model(base, meta);
    if method == SimulationMethod::Events {
        meta.insert("events.generated".into(), tally.generated.to_string());
        meta.insert("events.accepted".into(), tally.accepted.to_string());
        meta.insert("events.accidental".into(), tally.accidentals.to_string());
        meta.insert("events.out_of_range".into(), tally.out_of_range.to_string());
    }
    Ok(h)
}

fn describe_model(m: &SpectrumModel, meta: &mut BTreeMap<String, String>) {
    let join = |f: &dyn Fn(usize) -> f64| {
        (0..m.n_components()).map(|i| f(i).to_string()).collect::<Vec<_>>().join(",")
    };
    meta.insert("model.rates".into(), join(&|i| m.components[i].rate));
    meta.insert("model.intensities".into(), join(&|i| m.components[i].intensity));
    meta.insert("model.prompt_fraction".into(), m.prompt_fraction.to_string());
    meta.insert("model.t0".into(), m.irf.t0.to_string());
}

/// Simulates `n` replicas on streams `0..n` of `seed` (replica-parallel).
pub fn simulate_replicas(
    cfg: &SpectrometerConfig,
    scenario: &AnomalyScenario,
    base: &SpectrumModel,
    seed: u64,
    n: u64,
    method: SimulationMethod,
) -> Result<Vec<Histogram>> {
    (0..n)
        .into_par_iter()
        .map(|r| simulate_with(cfg, scenario, base, RngSeed::new(seed, r), method))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decay::{DecayComponent, InstrumentResponse};

    fn base() -> SpectrumModel {
        SpectrumModel {
            components: vec![
                DecayComponent { rate: 7989.6, intensity: 0.05 },
                DecayComponent { rate: 50.0, intensity: 0.65 },
                DecayComponent { rate: 7.039979, intensity: 0.30 },
            ],
            irf: InstrumentResponse { fwhm: 1.7, t0: 50.0 },
            prompt_fraction: 0.0,
            background_per_channel: 0.0,
            total_events: 1.0,
        }
    }

    #[test]
    fn standard_qed_is_identity() {
        for o in [FieldOrientation::None, FieldOrientation::Perpendicular, FieldOrientation::Parallel] {
            let s = AnomalyScenario::new(ExperimentMode::StandardQed, o);
            assert_eq!(apply_scenario(&base(), &s).unwrap(), base());
        }
    }

    #[test]
    fn resonance_transfers_half_of_ops() {
        let perp = AnomalyScenario::new(ExperimentMode::Resonance, FieldOrientation::Perpendicular);
        let m = apply_scenario(&base(), &perp).unwrap();
        assert!((m.components[2].intensity - 0.15).abs() < 1e-15);
        assert!((m.prompt_fraction - 0.15).abs() < 1e-15);
        assert!((m.fraction_sum() - 1.0).abs() < 1e-15);
        let par = apply_scenario(&base(), &perp.with_orientation(FieldOrientation::Parallel)).unwrap();
        assert_eq!(par, base());
        assert_eq!(par.components[2].intensity / m.components[2].intensity, 2.0);
        assert_eq!(perp.expected_doubling_ratio(), 2.0);
    }

    #[test]
    fn nonresonance_shifts_ops_rate() {
        let s = AnomalyScenario::new(ExperimentMode::NonresonanceLambda, FieldOrientation::None);
        let m = apply_scenario(&base(), &s).unwrap();
        assert!((m.components[2].rate - 7.053355).abs() < 5e-7);
        let par = apply_scenario(&base(), &s.with_orientation(FieldOrientation::Parallel)).unwrap();
        assert_eq!(par.components[2].rate, 7.039979);
    }

    #[test]
    fn scenario_rejects_wrong_shape() {
        let mut m = base();
        m.components.pop();
        let s = AnomalyScenario::new(ExperimentMode::Resonance, FieldOrientation::None);
        assert!(apply_scenario(&m, &s).is_err());
        let bad = AnomalyScenario { doubling_transfer: 1.5, ..s };
        assert!(apply_scenario(&base(), &bad).is_err());
    }

    #[test]
    fn discriminator_window() {
        let cfg = SpectrometerConfig::default();
        assert!(!cfg.stop_accepts(FULL_QUANTUM_MEV));
        assert!(cfg.stop_accepts(0.40));
        assert!(!cfg.stop_accepts(0.339));
        assert!(!cfg.stop_accepts(cfg.start_energy));
        let expect = 0.99 * (0.51 - 0.34) / 0.511;
        assert!((cfg.acceptance() - expect).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(SpectrometerConfig::default().validate().is_ok());
        let inside = SpectrometerConfig { start_energy: 0.4, ..Default::default() };
        assert!(inside.validate().is_err());
        let flipped = SpectrometerConfig { stop_window: [0.51, 0.34], ..Default::default() };
        assert!(flipped.validate().is_err());
        let no_time = SpectrometerConfig { live_time: 0.0, ..Default::default() };
        assert!(no_time.validate().is_err());
    }

    #[test]
    fn prompt_events_have_zero_emission_delay() {
        let cfg = SpectrometerConfig::default();
        let mut m = base();
        m.components.iter_mut().for_each(|c| c.intensity = 0.0);
        m.prompt_fraction = 1.0;
        let mut rng = chunk_rng(RngSeed::new(3, 0), 0);
        for _ in 0..100 {
            let ev = sample_event(&cfg, &m, &mut rng).unwrap();
            assert_eq!(ev.true_channel, EventChannel::PromptTransfer);
            assert_eq!(ev.emission_delay, 0.0);
            assert_eq!(ev.accepted, cfg.stop_accepts(ev.stop_energy_deposit));
        }
    }

    #[test]
    fn unnormalized_model_rejected_by_sampler() {
        let mut m = base();
        m.components[1].intensity = 0.5;
        assert!(EventSampler::new(&SpectrometerConfig::default(), &m).is_err());
    }

    #[test]
    fn t0_outside_axis_rejected() {
        let cfg = SpectrometerConfig::default();
        let mut m = base();
        m.irf.t0 = 5000.0;
        let r = simulate_spectrum(&cfg, &AnomalyScenario::default(), &m, RngSeed::default());
        assert!(r.is_err());
    }

    #[test]
    fn silent_source_gives_empty_histogram() {
        let cfg = SpectrometerConfig { source_activity: 0.0, accidental_rate: 0.0, ..Default::default() };
        let h = simulate_spectrum(&cfg, &AnomalyScenario::default(), &base(), RngSeed::new(1, 0)).unwrap();
        assert_eq!(h.total(), 0);
        assert_eq!(h.n_channels(), 4096);
    }

    #[test]
    fn chunk_means_partition_total() {
        let m = chunk_means(1e6);
        assert_eq!(m.len(), 4);
        assert!((m.iter().sum::<f64>() - 1e6).abs() < 1e-6);
        assert!(chunk_means(0.0).is_empty());
    }
}
