mod common;

use common::{neon, noiseless, scaled, LAMBDA_T};
use pals_core::analysis::{fit_joint, fit_mle, FitSpec, InformationStatus, Objective, RateUnit};
use pals_core::spectrometer::{simulate_with, SimulationMethod};
use pals_core::{AnomalyScenario, ChannelGeometry, ModelParam, RngSeed, SpectrometerConfig, SpectrumModel};
use proptest::prelude::*;

const RATE2: ModelParam = ModelParam::Rate(2);

fn truth() -> SpectrumModel {
    scaled(neon(), 1e6, 5.0)
}

fn binned(model: &SpectrumModel, accepted: f64, seed: u64) -> pals_core::Histogram {
    let mut cfg = SpectrometerConfig::default();
    cfg.live_time = accepted / (cfg.source_activity * cfg.acceptance());
    simulate_with(&cfg, &AnomalyScenario::default(), model, RngSeed::new(seed, 0), SimulationMethod::Binned).unwrap()
}

#[test]
fn noiseless_fit_recovers_truth() {
    // Large enough that rounding the expectations is negligible.
    let m = scaled(neon(), 1e13, 5e7);
    let h = noiseless(&m, ChannelGeometry::default());
    let r = fit_mle(&h, &FitSpec::from_model(&m)).unwrap();
    assert!(r.converged);
    for (p, (est, tru)) in ModelParam::all(3).zip(r.estimates.iter().zip(m.to_params())) {
        if p == ModelParam::PromptFraction {
            assert!(est.abs() < 1e-6, "prompt {est}");
            continue;
        }
        assert!((est - tru).abs() <= 1e-6 * tru.abs().max(1e-3), "{}: {est} vs {tru}", p.name());
    }
}

#[test]
fn deviance_trace_is_monotone_and_converges_from_offset_start() {
    let m = truth();
    let h = binned(&m, 1e6, 11);
    let mut start = m.clone();
    start.components[2].rate *= 1.1;
    start.components[1].rate *= 0.9;
    start.irf.t0 += 0.8;
    start.irf.fwhm *= 1.2;
    start.total_events *= 0.8;
    let r = fit_mle(&h, &FitSpec::from_model(&start)).unwrap();
    assert!(r.converged, "iterations {}", r.n_iterations);
    assert!(r.deviance_trace.windows(2).all(|w| w[1] <= w[0]));
    assert!(r.gradient_norm < 1e-3);
    assert!(r.covariance_psd(1e-8));
    assert_eq!(r.information, InformationStatus::Observed);
    let z = (r.get(RATE2) - LAMBDA_T) / r.std_error(RATE2);
    assert!(z.abs() < 4.0, "pull {z}");
}

#[test]
fn guess_then_fit_converges() {
    let m = truth();
    let h = binned(&m, 1e6, 5);
    let spec = FitSpec::guess(&h, &neon());
    let r = fit_mle(&h, &spec).unwrap();
    assert!(r.converged);
    assert!((r.get(RATE2) / LAMBDA_T - 1.0).abs() < 0.02);
}

#[test]
fn rate_units_give_identical_fits() {
    let m = truth();
    let h = binned(&m, 1e6, 3);
    let us = fit_mle(&h, &FitSpec::from_model(&m)).unwrap();
    let ns = fit_mle(&h, &FitSpec::from_model(&m).with_rate_unit(RateUnit::PerNanosecond)).unwrap();
    assert!((us.deviance - ns.deviance).abs() <= 1e-7 * us.deviance.max(1.0));
    let a = us.estimates_in(RateUnit::PerMicrosecond);
    let b = ns.estimates_in(RateUnit::PerMicrosecond);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-5 * x.abs().max(1e-6), "{x} vs {y}");
    }
    let rel = (us.std_error(RATE2) - ns.std_error(RATE2) * 1000.0).abs() / us.std_error(RATE2);
    assert!(rel < 1e-3, "{rel}");
}

#[test]
fn constrained_fit_never_beats_free_fit() {
    let m = truth();
    for seed in 0..3 {
        let h = binned(&m, 2e5, 100 + seed);
        let free = fit_mle(&h, &FitSpec::from_model(&m)).unwrap();
        let mut spec = FitSpec::from_model(&m);
        spec.fix(RATE2, LAMBDA_T * 1.01);
        let fixed = fit_mle(&h, &spec).unwrap();
        assert!(free.deviance <= fixed.deviance + 1e-6);
    }
}

#[test]
fn all_fixed_is_evaluation_only() {
    let m = truth();
    let h = binned(&m, 1e5, 1);
    let mut spec = FitSpec::from_model(&m);
    spec.fix_all();
    let r = fit_mle(&h, &spec).unwrap();
    assert!(r.converged);
    assert_eq!(r.n_iterations, 0);
    assert_eq!(r.information, InformationStatus::NotApplicable);
    assert!(r.std_errors.iter().all(|&e| e == 0.0));
    assert_eq!(r.degrees_of_freedom, 4096);
}

#[test]
fn non_convergence_is_reported() {
    let m = truth();
    let h = binned(&m, 1e6, 2);
    let mut start = m.clone();
    start.components[2].rate *= 1.5;
    let mut spec = FitSpec::from_model(&start);
    spec.max_iterations = 1;
    let r = fit_mle(&h, &spec).unwrap();
    assert!(!r.converged);
    assert_eq!(r.n_iterations, 1);
}

#[test]
fn least_squares_mode_is_close_to_poisson() {
    let m = truth();
    let h = binned(&m, 1e6, 9);
    let mut spec = FitSpec::from_model(&m);
    let p = fit_mle(&h, &spec).unwrap();
    spec.objective = Objective::LeastSquares;
    let ls = fit_mle(&h, &spec).unwrap();
    assert!(ls.converged);
    assert!((ls.get(ModelParam::TotalEvents) / p.get(ModelParam::TotalEvents) - 1.0).abs() < 0.02);
}

#[test]
fn degenerate_histogram_is_an_error() {
    let h = pals_core::Histogram::zeros(ChannelGeometry::default(), 1.0);
    assert!(fit_mle(&h, &FitSpec::from_model(&truth())).is_err());
}

#[test]
fn shared_intensity_joint_fit_matches_pooled_truth() {
    let m = truth();
    let a = binned(&m, 3e5, 21);
    let b = binned(&m, 3e5, 22);
    let spec = FitSpec::from_model(&m);
    let i2 = ModelParam::Intensity(2);
    let joint = fit_joint(&[&a, &b], &[spec.clone(), spec.clone()], &[i2]).unwrap();
    assert!(joint.converged);
    assert_eq!(joint.fits[0].get(i2), joint.fits[1].get(i2));
    let sep = fit_mle(&a, &spec).unwrap().deviance + fit_mle(&b, &spec).unwrap().deviance;
    assert!(sep <= joint.deviance + 1e-6);
    assert_eq!(joint.degrees_of_freedom, joint.fits[0].degrees_of_freedom + joint.fits[1].degrees_of_freedom + 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn noiseless_recovery_over_parameter_space(
        rate2 in 3.0f64..20.0,
        i2 in 0.1f64..0.5,
        t0 in 30.0f64..80.0,
        bkg in 0.0f64..20.0,
    ) {
        let mut m = scaled(neon(), 1e10, 0.0);
        m.components[2].rate = rate2;
        m.components[2].intensity = i2;
        m.components[1].intensity = 0.95 - i2;
        m.irf.t0 = t0;
        m.background_per_channel = bkg * 1e4;
        let h = noiseless(&m, ChannelGeometry::default());
        let r = fit_mle(&h, &FitSpec::from_model(&m)).unwrap();
        prop_assert!(r.converged);
        prop_assert!((r.get(RATE2) / rate2 - 1.0).abs() < 1e-3);
        let s: f64 = (0..3).map(|i| r.get(ModelParam::Intensity(i))).sum::<f64>() + r.get(ModelParam::PromptFraction);
        prop_assert!((s - 1.0).abs() < 1e-12);
    }
}
