use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use smart_tmle::error::Error;
use smart_tmle::inference::{
    contrast_test, covariance_estimate, influence_components, normal_cdf, normal_quantile,
    regime_inference, variance_estimate, variance_estimate_with, InfluenceCurve, VarianceForm,
};
use smart_tmle::regime::{Regime, RegimeLabel};
use smart_tmle::simulator::{simulate_trial, SimParams};
use smart_tmle::tmle::{estimate_regime_mean, TmleConfig, TmleFit};

fn curve(total: Vec<f64>) -> InfluenceCurve {
    let n = total.len();
    InfluenceCurve { components: [total.clone(), vec![0.0; n], vec![0.0; n], vec![0.0; n]], total }
}

/// A real fit on 64 subjects whose estimate and influence values can be
/// overwritten.
fn base_fit(label: RegimeLabel) -> TmleFit {
    let data = simulate_trial(&SimParams { n: 64, ..SimParams::default() }, 2).unwrap();
    estimate_regime_mean(&data, &Regime::new(label), &TmleConfig::glm()).unwrap()
}

fn with_curve(mut fit: TmleFit, psi: f64, d0: Vec<f64>) -> TmleFit {
    let n = d0.len();
    fit.psi = psi;
    fit.components = [d0, vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    fit
}

#[test]
fn covariance_fixture_by_hand() {
    let a = curve(vec![1.5, -0.5, 2.0, -3.0]);
    let b = curve(vec![0.25, 1.0, -1.0, 0.75]);
    // (0.375 - 0.5 - 2 - 2.25) / 4
    assert!((covariance_estimate(&a, &b).unwrap() - (-4.375 / 4.0)).abs() <= 1e-12);
    assert!((covariance_estimate(&a, &a).unwrap() - variance_estimate(&a)).abs() <= 1e-15);
    assert_eq!(covariance_estimate(&curve(vec![1.0, -1.0]), &curve(vec![1.0, 1.0])).unwrap(), 0.0);
    assert!(covariance_estimate(&a, &curve(vec![1.0])).is_err());
}

#[test]
fn summed_and_per_component_forms() {
    let ic = InfluenceCurve {
        components: [vec![1.0, -1.0], vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 2.0]],
        total: vec![2.0, 1.0],
    };
    assert_eq!(variance_estimate_with(&ic, VarianceForm::SummedComponents), 2.5);
    assert_eq!(variance_estimate_with(&ic, VarianceForm::ComponentSquares), 3.5);
}

#[test]
fn identical_fits_do_not_reject() {
    let f = base_fit(RegimeLabel::II);
    let c = contrast_test(&f, &f, 0.05).unwrap();
    assert_eq!(c.estimate, 0.0);
    assert_eq!(c.z, 0.0);
    assert_eq!(c.p_value, 1.0);
    assert!(!c.reject);
}

#[test]
fn zero_variance_with_a_gap_is_an_error() {
    let one = with_curve(base_fit(RegimeLabel::I), 3.0, vec![0.0; 64]);
    let two = with_curve(base_fit(RegimeLabel::II), 2.0, vec![0.0; 64]);
    assert!(matches!(contrast_test(&two, &one, 0.05), Err(Error::DegenerateVariance(_))));
}

#[test]
fn critical_value_is_not_rejected() {
    // tau = 1 and n = 64, so the standard error is exactly 1/8.
    let pm: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let crit = normal_quantile(0.975).unwrap();
    let one = with_curve(base_fit(RegimeLabel::I), 0.0, vec![0.0; 64]);
    let at = with_curve(base_fit(RegimeLabel::II), crit / 8.0, pm.clone());
    let c = contrast_test(&at, &one, 0.05).unwrap();
    assert_eq!(c.se, 0.125);
    assert_eq!(c.z, crit);
    assert!(!c.reject);
    // 1.96 itself lies just beyond the exact quantile.
    let past = with_curve(base_fit(RegimeLabel::II), 1.96 / 8.0, pm);
    assert!(contrast_test(&past, &one, 0.05).unwrap().reject);
}

#[test]
fn regime_interval_is_symmetric_about_the_estimate() {
    let f = base_fit(RegimeLabel::III);
    let r = regime_inference(&f, 0.1, VarianceForm::SummedComponents).unwrap();
    let half = normal_quantile(0.95).unwrap() * r.se;
    assert!((r.ci_upper - f.psi - half).abs() <= 1e-12 && (f.psi - r.ci_lower - half).abs() <= 1e-12);
    let ic = influence_components(&f);
    assert!((r.se - (variance_estimate(&ic) / f.n as f64).sqrt()).abs() <= 1e-15);
}

/// Reference values from 30-digit arithmetic.
#[test]
fn pinned_values() {
    let cdf = [
        (-8.5, 9.4795348222033183542e-18),
        (-3.1, 0.00096760321321835689212),
        (-0.97, 0.1660232460635296093),
        (0.0, 0.5),
        (1.2, 0.88493032977829173198),
        (4.75, 0.9999989829167574313),
    ];
    for (x, want) in cdf {
        assert!((normal_cdf(x) - want).abs() <= 1e-15 * want.max(1e-300) + 1e-16, "cdf {x}");
    }
    let quantiles = [
        (1e-10, -6.3613409024040562047),
        (0.001, -3.0902323061678135415),
        (0.025, -1.9599639845400542355),
        (0.5, 0.0),
        (0.975, 1.9599639845400542355),
        (0.999999, 4.7534243088228989482),
    ];
    for (p, want) in quantiles {
        assert!((normal_quantile(p).unwrap() - want).abs() <= 1e-8, "quantile {p}");
    }
}

#[test]
fn quantile_levels_outside_the_unit_interval_fail() {
    for p in [0.0, 1.0, -0.2, f64::NAN] {
        assert!(normal_quantile(p).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn quantile_matches_reference(p in 1e-12f64..(1.0 - 1e-12)) {
        let reference = Normal::new(0.0, 1.0).unwrap().inverse_cdf(p);
        prop_assert!((normal_quantile(p).unwrap() - reference).abs() <= 1e-8);
    }

    #[test]
    fn cdf_matches_reference(x in -30.0f64..30.0) {
        let reference = Normal::new(0.0, 1.0).unwrap().cdf(x);
        prop_assert!((normal_cdf(x) - reference).abs() <= 1e-10);
    }

    #[test]
    fn cauchy_schwarz(pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 2..60)) {
        let a = curve(pairs.iter().map(|p| p.0).collect());
        let b = curve(pairs.iter().map(|p| p.1).collect());
        let (va, vb) = (variance_estimate(&a), variance_estimate(&b));
        prop_assert!(va >= 0.0 && vb >= 0.0);
        let c = covariance_estimate(&a, &b).unwrap();
        prop_assert!(c * c <= va * vb * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn swapping_the_order_negates_the_contrast(
        d1 in prop::collection::vec(-5.0f64..5.0, 64),
        d2 in prop::collection::vec(-5.0f64..5.0, 64),
        psi1 in 0.0f64..10.0,
        psi2 in 0.0f64..10.0,
    ) {
        let f1 = with_curve(base_fit(RegimeLabel::II), psi1, d1);
        let f2 = with_curve(base_fit(RegimeLabel::I), psi2, d2);
        let (a, b) = (contrast_test(&f1, &f2, 0.05).unwrap(), contrast_test(&f2, &f1, 0.05).unwrap());
        prop_assert_eq!(a.estimate, -b.estimate);
        prop_assert_eq!(a.z, -b.z);
        prop_assert_eq!(a.p_value, b.p_value);
        prop_assert_eq!(a.reject, b.reject);
        prop_assert!((a.ci_lower + b.ci_upper).abs() <= 1e-12 && (a.ci_upper + b.ci_lower).abs() <= 1e-12);
        prop_assert!(a.ci_lower <= a.estimate && a.estimate <= a.ci_upper);
        prop_assert!((0.0..=1.0).contains(&a.p_value));
    }
}
