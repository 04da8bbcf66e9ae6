mod common;

use common::{neon, scaled, LAMBDA_T};
use pals_core::analysis::{gradient_check, FitSpec, GRADIENT_CHECK_TOL};
use pals_core::decay::{component_cdf, eval_component, eval_prompt};
use pals_core::special::norm_pdf;
use pals_core::{expected_counts, ChannelGeometry, DecayComponent, Histogram, InstrumentResponse, ModelParam};
use proptest::prelude::*;

/// Composite Simpson integration of λ e^{−λs} g(x − s) over s ≥ 0, restricted
/// to where the Gaussian is non-negligible.
fn brute_force(rate_us: f64, fwhm: f64, x: f64) -> f64 {
    let lambda = rate_us / 1000.0;
    let sigma = fwhm / 2.354_820_045_030_949_3;
    let lo = (x - 14.0 * sigma).max(0.0);
    let hi = x + 14.0 * sigma;
    if hi <= lo {
        return 0.0;
    }
    let n = 4000;
    let h = (hi - lo) / n as f64;
    let f = |s: f64| lambda * (-lambda * s).exp() * norm_pdf((x - s) / sigma) / sigma;
    let mut sum = f(lo) + f(hi);
    for i in 1..n {
        sum += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}

fn irf() -> InstrumentResponse {
    InstrumentResponse { fwhm: 1.7, t0: 0.0 }
}

#[test]
fn closed_form_matches_numerical_convolution() {
    for rate in [7.04, 1.0] {
        let c = DecayComponent { rate, intensity: 1.0 };
        let tau = 1000.0 / rate;
        let mut worst: f64 = 0.0;
        for i in 0..1000 {
            // −5 ns (left of the peak) out to eight lifetimes
            let t = -5.0 + (8.0 * tau + 5.0) * i as f64 / 999.0;
            let exact = eval_component(&c, &irf(), t).unwrap();
            let numeric = brute_force(rate, 1.7, t);
            worst = worst.max((exact - numeric).abs() / numeric);
        }
        assert!(worst <= 1e-6, "rate {rate}: {worst:e}");
    }
}

#[test]
fn cdf_is_integral_of_density() {
    let c = DecayComponent { rate: LAMBDA_T, intensity: 1.0 };
    let r = irf();
    let (a, b) = (-3.0, 40.0);
    let n = 20_000;
    let h = (b - a) / n as f64;
    let mut sum = eval_component(&c, &r, a).unwrap() + eval_component(&c, &r, b).unwrap();
    for i in 1..n {
        sum += eval_component(&c, &r, a + i as f64 * h).unwrap() * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let integral = sum * h / 3.0;
    let diff = component_cdf(&c, &r, b).unwrap() - component_cdf(&c, &r, a).unwrap();
    assert!((integral - diff).abs() < 1e-10, "{integral} vs {diff}");
}

#[test]
fn channel_sums_approach_total() {
    let mut m = scaled(neon(), 1e6, 0.0);
    m.components[2].rate = 50.0;
    m.prompt_fraction = 0.1;
    m.components[1].intensity = 0.55;
    let mu = expected_counts(&m, &ChannelGeometry::new(0.5, 4096).unwrap()).unwrap();
    let total: f64 = mu.iter().sum();
    assert!((total - 1e6).abs() < 1e-6 * 1e6, "{total}");
}

#[test]
fn long_tail_decays_at_component_rate() {
    let c = DecayComponent { rate: LAMBDA_T, intensity: 0.3 };
    let r = InstrumentResponse { fwhm: 1.7, t0: 50.0 };
    let lambda = LAMBDA_T / 1000.0;
    for t in [100.0, 400.0, 1000.0] {
        let ratio = eval_component(&c, &r, t + 10.0).unwrap() / eval_component(&c, &r, t).unwrap();
        assert!((ratio - (-lambda * 10.0f64).exp()).abs() < 1e-12);
    }
}

#[test]
fn prompt_peak_is_normalized_gaussian() {
    let r = InstrumentResponse { fwhm: 1.7, t0: 3.0 };
    let sigma = r.sigma();
    let peak = eval_prompt(&r, 3.0).unwrap();
    assert!((peak - 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt())).abs() < 1e-14);
    let half = eval_prompt(&r, 3.0 + 0.85).unwrap();
    assert!((half / peak - 0.5).abs() < 1e-9);
}

#[test]
fn gradient_check_default_model() {
    let m = scaled(neon(), 1e6, 5.0);
    let h = Histogram::zeros(ChannelGeometry::default(), 1.0);
    let g = gradient_check(&FitSpec::from_model(&m), &h).unwrap();
    assert!(g.passes(GRADIENT_CHECK_TOL), "{g:?}");
    assert!(g.diagnostic(GRADIENT_CHECK_TOL).is_none());
    assert_eq!(g.per_parameter.len(), 9);
}

#[test]
fn gradient_check_names_offender_when_threshold_is_impossible() {
    let m = scaled(neon(), 1e6, 5.0);
    let h = Histogram::zeros(ChannelGeometry::default(), 1.0);
    let g = gradient_check(&FitSpec::from_model(&m), &h).unwrap();
    let msg = g.diagnostic(0.0).expect("some rounding deviation is always present");
    assert!(msg.contains(g.worst.as_deref().unwrap()));
}

#[test]
fn gradient_check_step_underflow() {
    let m = scaled(neon(), 1e6, 5.0);
    let mut spec = FitSpec::from_model(&m);
    spec.fix_all();
    spec.release(ModelParam::TimeZero);
    let h = Histogram::zeros(ChannelGeometry::default(), 1.0);
    spec.t0.value = f64::MAX;
    assert!(gradient_check(&spec, &h).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn jacobian_matches_finite_differences(
        r1 in 20.0f64..200.0,
        r2 in 1.0f64..20.0,
        i2 in 0.05f64..0.6,
        prompt in 0.0f64..0.2,
        fwhm in 0.3f64..3.0,
        t0 in 20.0f64..200.0,
        bkg in 0.0f64..50.0,
    ) {
        let mut m = scaled(neon(), 1e6, bkg);
        m.components[1].rate = r1;
        m.components[2].rate = r2;
        m.components[2].intensity = i2;
        m.components[1].intensity = 0.95 - i2 - prompt;
        m.prompt_fraction = prompt;
        m.irf = InstrumentResponse { fwhm, t0 };
        prop_assume!(m.components[1].intensity > 0.0);
        let h = Histogram::zeros(ChannelGeometry::default(), 1.0);
        let g = gradient_check(&FitSpec::from_model(&m), &h).unwrap();
        prop_assert!(g.passes(GRADIENT_CHECK_TOL), "{:?}", g);
    }

    #[test]
    fn counts_are_linear_in_total(total in 1.0f64..1e8, k in 0.1f64..10.0) {
        let geom = ChannelGeometry::new(0.5, 512).unwrap();
        let a = expected_counts(&scaled(neon(), total, 0.0), &geom).unwrap();
        let b = expected_counts(&scaled(neon(), total * k, 0.0), &geom).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((y - k * x).abs() <= 1e-12 * (k * x).abs().max(1e-300));
        }
    }
}
