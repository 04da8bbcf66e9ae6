//! The shared run configuration file.
//!
//! ```toml
//! [spectrometer]          # required by simulate / experiment / power
//! timing_fwhm = 1.7
//!
//! [model]
//! rates = [7989.6, 50.0, 7.039979]   # μs⁻¹
//! intensities = [0.05, 0.65, 0.30]
//!
//! [scenario]
//! mode = "resonance"
//! field_orientation = "perpendicular"
//!
//! [run]
//! seed = 1
//!
//! [constants]
//! alpha = 7.2973525693e-3
//! ```
//!
//! Keys are the field names of the corresponding types; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::fit::FitSpec;
use crate::decay::{DecayComponent, InstrumentResponse, SpectrumModel};
use crate::error::{Error, Result};
use crate::lattice::PhysicalConstants;
use crate::spectrometer::{AnomalyScenario, SimulationMethod, SpectrometerConfig};

/// Physics of the source: rates in μs⁻¹. The defaults are illustrative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub rates: Vec<f64>,
    pub intensities: Vec<f64>,
    pub prompt_fraction: f64,
    /// ns.
    pub t0: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            rates: vec![7989.6, 50.0, 7.039979],
            intensities: vec![0.05, 0.65, 0.30],
            prompt_fraction: 0.0,
            t0: 50.0,
        }
    }
}

impl ModelSection {
    /// Normalized model (one event, no background) with the given timing width.
    pub fn to_model(&self, fwhm: f64) -> Result<SpectrumModel> {
        if self.rates.len() != self.intensities.len() {
            return Err(Error::Config(format!(
                "[model] has {} rates but {} intensities",
                self.rates.len(),
                self.intensities.len()
            )));
        }
        let m = SpectrumModel {
            components: self
                .rates
                .iter()
                .zip(&self.intensities)
                .map(|(&rate, &intensity)| DecayComponent { rate, intensity })
                .collect(),
            irf: InstrumentResponse { fwhm, t0: self.t0 },
            prompt_fraction: self.prompt_fraction,
            background_per_channel: 0.0,
            total_events: 1.0,
        };
        m.validate().map_err(|e| Error::Config(format!("[model]: {e}")))?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    Doubling,
    RateShift,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Doubling => "doubling",
            Self::RateShift => "rate_shift",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub stream_id: u64,
    pub method: SimulationMethod,
    pub experiment: ExperimentKind,
    pub significance: f64,
    /// μs⁻¹; defaults to the model's o-Ps rate.
    pub lambda_null: Option<f64>,
    /// Expected accepted true events per arm.
    pub grid: Vec<f64>,
    pub replicas: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 1,
            stream_id: 0,
            method: SimulationMethod::Events,
            experiment: ExperimentKind::Doubling,
            significance: 0.05,
            lambda_null: None,
            grid: vec![1e4, 1e5, 1e6],
            replicas: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub spectrometer: Option<SpectrometerConfig>,
    #[serde(default)]
    pub model: ModelSection,
    pub scenario: Option<AnomalyScenario>,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub constants: PhysicalConstants,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = &cfg.spectrometer {
            s.validate().map_err(|e| Error::Config(format!("[spectrometer]: {e}")))?;
        }
        if let Some(s) = &cfg.scenario {
            s.validate().map_err(|e| Error::Config(format!("[scenario]: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn spectrometer(&self) -> Result<&SpectrometerConfig> {
        self.spectrometer
            .as_ref()
            .ok_or_else(|| Error::Config("missing [spectrometer] section".into()))
    }

    pub fn scenario(&self) -> Result<&AnomalyScenario> {
        self.scenario.as_ref().ok_or_else(|| Error::Config("missing [scenario] section".into()))
    }

    /// Scenario, or standard QED without a field when the section is absent.
    pub fn scenario_or_default(&self) -> AnomalyScenario {
        self.scenario.unwrap_or_default()
    }

    pub fn base_model(&self) -> Result<SpectrumModel> {
        self.model.to_model(self.spectrometer()?.timing_fwhm)
    }
}

/// Reads a fit specification (the [`FitSpec`] fields as TOML).
pub fn parse_fit_spec(text: &str) -> Result<FitSpec> {
    let spec: FitSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    spec.validate().map_err(|e| Error::Config(format!("fit spec: {e}")))?;
    Ok(spec)
}

pub fn fit_spec_to_toml(spec: &FitSpec) -> String {
    toml::to_string(spec).unwrap_or_default()
}
