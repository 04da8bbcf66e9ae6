//! Positron and positronium annihilation lifetime spectroscopy toolkit.
//!
//! * [`decay`]: convolved multi-exponential spectrum model and channel expectations.
//! * [`histogram`]: channel geometry and the `pals-histogram v1` text format.
//! * [`spectrometer`]: fast-slow coincidence Monte Carlo and anomaly scenarios.
//! * [`analysis`]: Poisson maximum-likelihood fitting, likelihood-ratio tests, power scans.
//! * [`lattice`]: fine-structure-constant / Planck-mass numeric identity.
//! * [`config`] and [`report`]: the shared run configuration and `pals-report v1` output.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod decay;
mod error;
pub mod histogram;
pub mod lattice;
pub mod report;
pub mod spectrometer;
pub mod special;

pub use decay::{
    eval_component, expected_counts, expected_counts_with_jacobian, mean_lifetime, DecayComponent,
    InstrumentResponse, ModelParam, SpectrumModel,
};
pub use error::{Error, Result};
pub use histogram::{merge_histograms, ChannelGeometry, Histogram};
pub use spectrometer::{
    apply_scenario, sample_event, simulate_spectrum, AnomalyScenario, EventRecord, ExperimentMode,
    FieldOrientation, RngSeed, SimulationMethod, SpectrometerConfig,
};
