#![allow(dead_code)]

use pals_core::{ChannelGeometry, DecayComponent, Histogram, InstrumentResponse, SpectrumModel};

pub const LAMBDA_T: f64 = 7.039979;

/// Three-component neon-like model, normalized to one event.
pub fn neon() -> SpectrumModel {
    SpectrumModel {
        components: vec![
            DecayComponent { rate: 7989.6, intensity: 0.05 },
            DecayComponent { rate: 50.0, intensity: 0.65 },
            DecayComponent { rate: LAMBDA_T, intensity: 0.30 },
        ],
        irf: InstrumentResponse { fwhm: 1.7, t0: 50.0 },
        prompt_fraction: 0.0,
        background_per_channel: 0.0,
        total_events: 1.0,
    }
}

pub fn scaled(mut m: SpectrumModel, total: f64, background: f64) -> SpectrumModel {
    m.total_events = total;
    m.background_per_channel = background;
    m
}

/// Histogram of rounded expectations.
pub fn noiseless(model: &SpectrumModel, geom: ChannelGeometry) -> Histogram {
    let mu = pals_core::expected_counts(model, &geom).unwrap();
    let counts = mu.iter().map(|m| m.round() as u64).collect();
    Histogram::from_counts(geom, counts, 1.0).unwrap()
}
