//! Monte Carlo power of the likelihood-ratio tests as a function of statistics.

use rayon::prelude::*;

use crate::analysis::fit::FitSpec;
use crate::analysis::hypothesis::{lr_test_doubling, lr_test_rate_shift};
use crate::analysis::stats::wilson_interval;
use crate::decay::SpectrumModel;
use crate::error::{domain, Result};
use crate::spectrometer::{
    apply_scenario, simulate_with, AnomalyScenario, RngSeed, SimulationMethod, SpectrometerConfig, ORTHO_POSITRONIUM,
};

/// Normal quantile of the 95 % binomial interval.
const Z95: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PowerExperiment {
    /// Both arms are simulated and compared with [`lr_test_doubling`].
    Doubling,
    /// Only the measured arm is simulated; its o-Ps rate is tested against the
    /// reference arm's rate with [`lr_test_rate_shift`].
    RateShift,
}

impl PowerExperiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Doubling => "doubling",
            Self::RateShift => "rate_shift",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PowerScan {
    pub spectrometer: SpectrometerConfig,
    pub base: SpectrumModel,
    /// Scenario producing the data under test.
    pub measured: AnomalyScenario,
    /// Reference arm (parallel orientation, or the null rate).
    pub reference: AnomalyScenario,
    pub experiment: PowerExperiment,
    /// Expected accepted true events per arm; must be non-decreasing.
    pub grid: Vec<f64>,
    pub replicas: usize,
    pub significance: f64,
    pub seed: u64,
    pub method: SimulationMethod,
    /// Null o-Ps rate (μs⁻¹) for the rate-shift test; the reference arm's rate when `None`.
    pub lambda_null: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerPoint {
    pub n_events: f64,
    pub replicas: usize,
    pub rejections: usize,
    /// Replicas whose fits failed or did not converge (counted as non-rejections).
    pub failures: usize,
    pub power: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub median_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerCurve {
    pub experiment: PowerExperiment,
    pub significance: f64,
    pub points: Vec<PowerPoint>,
}

impl PowerCurve {
    /// Each point's upper bound is no lower than every earlier point's lower bound.
    pub fn monotone_within_errors(&self) -> bool {
        self.points.iter().enumerate().all(|(i, p)| self.points[..i].iter().all(|q| p.ci_high >= q.ci_low))
    }

    /// Smallest grid point whose estimated power reaches `target`.
    pub fn min_n_for(&self, target: f64) -> Option<&PowerPoint> {
        self.points.iter().find(|p| p.power >= target)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one (grid point, arm) pair; replicas use streams of it.
pub fn derive_seed(master: u64, grid_index: usize, arm: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ grid_index as u64) ^ arm)
}

impl PowerScan {
    fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(domain("power scan needs at least one replica"));
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(domain(format!("significance must lie in (0, 1), got {}", self.significance)));
        }
        if self.grid.is_empty() {
            return Err(domain("power scan grid is empty"));
        }
        if self.grid.iter().any(|n| !(n.is_finite() && *n >= 0.0)) {
            return Err(domain("grid values must be finite and >= 0"));
        }
        if self.grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(domain("grid must be non-decreasing"));
        }
        self.spectrometer.validate()?;
        self.measured.validate()?;
        self.reference.validate()
    }

    /// The spectrometer run long enough to expect `n` accepted true events.
    fn config_for(&self, n: f64) -> SpectrometerConfig {
        let mut cfg = self.spectrometer.clone();
        cfg.live_time = n / (cfg.source_activity * cfg.acceptance());
        cfg
    }

    fn replica(&self, cfg: &SpectrometerConfig, grid_index: usize, r: usize) -> Result<(bool, bool, f64)> {
        let seed = |arm| RngSeed::new(derive_seed(self.seed, grid_index, arm), r as u64);
        let reference_model = apply_scenario(&self.base, &self.reference)?;
        let spec = FitSpec::from_model(&cfg.expected_model(&reference_model));
        let h = simulate_with(cfg, &self.measured, &self.base, seed(0), self.method)?;
        let t = match self.experiment {
            PowerExperiment::Doubling => {
                let h_ref = simulate_with(cfg, &self.reference, &self.base, seed(1), self.method)?;
                lr_test_doubling(&h, &h_ref, &spec, self.significance)?
            }
            PowerExperiment::RateShift => {
                let lambda_null =
                    self.lambda_null.unwrap_or(reference_model.components[ORTHO_POSITRONIUM].rate);
                lr_test_rate_shift(&h, lambda_null, &spec, self.significance)?
            }
        };
        Ok((t.reject, t.converged, t.effective_sigma))
    }
}

/// Rejection fraction of the test at every grid point, with 95 % Wilson intervals.
/// Replicas run in parallel; results do not depend on the thread count.
pub fn power_scan(scan: &PowerScan) -> Result<PowerCurve> {
    scan.validate()?;
    let mut points = Vec::with_capacity(scan.grid.len());
    for (g, &n) in scan.grid.iter().enumerate() {
        if n == 0.0 {
            // No data: the test rejects at its nominal rate.
            points.push(PowerPoint {
                n_events: 0.0,
                replicas: scan.replicas,
                rejections: 0,
                failures: 0,
                power: scan.significance,
                ci_low: scan.significance,
                ci_high: scan.significance,
                median_sigma: 0.0,
            });
            continue;
        }
        let cfg = scan.config_for(n);
        let outcomes: Vec<Option<(bool, bool, f64)>> =
            (0..scan.replicas).into_par_iter().map(|r| scan.replica(&cfg, g, r).ok()).collect();
        let rejections = outcomes.iter().filter(|o| matches!(o, Some((true, _, _)))).count();
        let failures = outcomes.iter().filter(|o| !matches!(o, Some((_, true, _)))).count();
        let mut sigmas: Vec<f64> = outcomes.iter().map(|o| o.map_or(0.0, |(_, _, s)| s)).collect();
        sigmas.sort_by(f64::total_cmp);
        let (ci_low, ci_high) = wilson_interval(rejections, scan.replicas, Z95);
        points.push(PowerPoint {
            n_events: n,
            replicas: scan.replicas,
            rejections,
            failures,
            power: rejections as f64 / scan.replicas as f64,
            ci_low,
            ci_high,
            median_sigma: median(&sigmas),
        });
    }
    Ok(PowerCurve { experiment: scan.experiment, significance: scan.significance, points })
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
