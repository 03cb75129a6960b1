use proptest::prelude::*;

use smart_tmle::data::{SubjectRecord, TrialDataset};
use smart_tmle::design::Layout;
use smart_tmle::glm::GlmFit;
use smart_tmle::propensity::{
    estimate_ga0, estimate_ga1, estimate_gc, AttendanceModel, AttendanceModels, PropensityFits,
    StageOneAssignment, DEFAULT_DELTA_G,
};
use smart_tmle::regime::{Arm, Regime, RegimeLabel};
use smart_tmle::simulator::{simulate_trial, SimParams};

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn complete(id: &str, a0: u8, w0: f64, ys: [u32; 4], a1: u8) -> SubjectRecord {
    SubjectRecord {
        id: id.into(),
        w0,
        y0: ys[0],
        a0: Arm::from_code(a0).unwrap(),
        c1: true,
        w1: None,
        y1: Some(ys[1]),
        a1: Some(Arm::from_code(a1).unwrap()),
        c2: true,
        w2: None,
        y2: Some(ys[2]),
        c3: true,
        y3: Some(ys[3]),
    }
}

fn logistic(coefficients: Vec<f64>, visit: usize) -> AttendanceModel {
    AttendanceModel {
        visit,
        fit: Some(GlmFit {
            coefficients,
            theta: None,
            converged: true,
            deviance: 0.0,
            iterations: 0,
            ridge_used: false,
        }),
        constant: None,
        degenerate: false,
        converged: true,
        n_fit: 0,
    }
}

fn constant(p: f64, visit: usize) -> AttendanceModel {
    AttendanceModel { visit, fit: None, constant: Some(p), degenerate: false, converged: true, n_fit: 0 }
}

#[test]
fn fitted_attendance_matches_design_rate() {
    let params = SimParams { n: 5000, alpha0: -4.06, ..SimParams::default() };
    let data = simulate_trial(&params, 17).unwrap();
    let target = 1.0 - expit(-4.06);
    assert!((target - 0.9831).abs() < 1e-4);
    let layout = Layout::of(&data);
    for t in 1..=3 {
        let model = estimate_gc(&data, t).unwrap();
        let at_risk: Vec<&SubjectRecord> = data.records().iter().filter(|r| r.attended_through(t - 1)).collect();
        let mean = at_risk
            .iter()
            .map(|r| {
                let f = smart_tmle::design::history_features(t, r.a0, r.a1.unwrap_or(r.a0), r, layout).unwrap();
                model.evaluate(&f).unwrap()
            })
            .sum::<f64>()
            / at_risk.len() as f64;
        assert!((mean - target).abs() <= 0.01, "visit {t}: {mean}");
    }
}

#[test]
fn balanced_randomization_and_exact_partition() {
    let data = simulate_trial(&SimParams { n: 30_000, ..SimParams::default() }, 3).unwrap();
    let probs: Vec<f64> = [RegimeLabel::I, RegimeLabel::II, RegimeLabel::III]
        .iter()
        .map(|&l| estimate_ga0(&data, &Regime::new(l)).unwrap())
        .collect();
    for p in &probs {
        assert!((p - 1.0 / 3.0).abs() < 0.01);
    }
    let counts: usize = probs.iter().map(|p| (p * data.n() as f64).round() as usize).sum();
    assert_eq!(counts, data.n());
}

#[test]
fn first_visit_product() {
    let data = TrialDataset::new(vec![complete("a", 1, 0.0, [1, 1, 1, 1], 1)]).unwrap();
    let fits = PropensityFits {
        regime: Regime::new(RegimeLabel::II),
        ga0: 1.0 / 3.0,
        ga1: StageOneAssignment { eligible_probability: 0.5 },
        gc: AttendanceModels { models: [constant(0.95, 1), constant(0.9, 2), constant(0.9, 3)] },
        delta_g: DEFAULT_DELTA_G,
        layout: Layout::of(&data),
    };
    let p = fits.regime_propensity(&data.records()[0], 1).unwrap();
    assert!((p.value - 0.95 / 3.0).abs() <= 1e-15);
    assert!((p.value - 0.3167).abs() < 5e-5);
    assert_eq!(p.truncated, 0);
}

/// Six subjects; visit models with fixed coefficients so each factor can be
/// written out by hand.
#[test]
fn three_visit_product_by_hand() {
    let records = vec![
        complete("s1", 1, 1.0, [1, 2, 0, 3], 3),
        complete("s2", 1, 0.0, [2, 2, 1, 0], 1),
        complete("s3", 1, 1.0, [3, 1, 2, 2], 1),
        complete("s4", 0, 0.0, [0, 0, 1, 1], 0),
        complete("s5", 2, 1.0, [1, 4, 2, 1], 3),
        complete("s6", 1, 0.0, [1, 3, 1, 0], 3),
    ];
    let data = TrialDataset::new(records).unwrap();
    let regime = Regime::new(RegimeLabel::II);
    let b1 = vec![2.0, 0.3, -0.4, 0.25, -0.1];
    let b2 = vec![1.5, 0.2, -0.3, 0.5, 0.6, -0.2, 0.1, 0.05];
    let b3 = vec![1.0, 0.1, 0.2, -0.3, 0.4, 0.15, -0.05, 0.02, 0.3];
    let fits = PropensityFits {
        regime,
        ga0: estimate_ga0(&data, &regime).unwrap(),
        ga1: estimate_ga1(&data, &regime).unwrap(),
        gc: AttendanceModels { models: [logistic(b1.clone(), 1), logistic(b2.clone(), 2), logistic(b3.clone(), 3)] },
        delta_g: DEFAULT_DELTA_G,
        layout: Layout::of(&data),
    };
    // Four of six start on text messaging.
    assert_eq!(fits.ga0, 4.0 / 6.0);
    // Eligible text-arm attendees: s1 (1->2), s2 (2->2), s6 (1->3); two stepped up.
    assert_eq!(fits.ga1.eligible_probability, 2.0 / 3.0);

    let dot = |b: &[f64], x: &[f64]| b[0] + b[1..].iter().zip(x).map(|(u, v)| u * v).sum::<f64>();
    // s1: w0=1, y0=1, y1=2, y2=0; eligible, so the regime steps up to arm 3.
    // Visit 1 row: 1(a0=1), 1(a0=2), w0, y0.
    // Visit 2 row: 1(1,1), 1(2,2), 1(1,3), 1(2,3), w0, y0, y1; visit 3 adds y2.
    let g1 = expit(dot(&b1, &[1.0, 0.0, 1.0, 1.0]));
    let g2 = expit(dot(&b2, &[0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 2.0]));
    let g3 = expit(dot(&b3, &[0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 2.0, 0.0]));
    let hand = (4.0 / 6.0) * (2.0 / 3.0) * g1 * g2 * g3;
    let got = fits.regime_propensity(&data.records()[0], 3).unwrap();
    assert!((got.value - hand).abs() <= 1e-12, "{} vs {hand}", got.value);

    // s3: y1 < y0, so no stage-1 factor and the arm history stays (1, 1).
    let g1 = expit(dot(&b1, &[1.0, 0.0, 1.0, 3.0]));
    let g2 = expit(dot(&b2, &[1.0, 0.0, 0.0, 0.0, 1.0, 3.0, 1.0]));
    let g3 = expit(dot(&b3, &[1.0, 0.0, 0.0, 0.0, 1.0, 3.0, 1.0, 2.0]));
    let hand = (4.0 / 6.0) * g1 * g2 * g3;
    let got = fits.regime_propensity(&data.records()[2], 3).unwrap();
    assert!((got.value - hand).abs() <= 1e-12, "{} vs {hand}", got.value);
}

#[test]
fn control_regime_has_no_stage_one_factor() {
    let data = simulate_trial(&SimParams { n: 300, ..SimParams::default() }, 8).unwrap();
    let ga1 = estimate_ga1(&data, &Regime::new(RegimeLabel::I)).unwrap();
    for y0 in 0..5 {
        for y1 in 0..5 {
            assert_eq!(ga1.evaluate(y0, y1), 1.0);
        }
    }
}

fn simulated_fits(seed: u64) -> (TrialDataset, Vec<PropensityFits>) {
    let data = simulate_trial(&SimParams { n: 400, alpha0: -2.0, ..SimParams::default() }, seed).unwrap();
    let gc = AttendanceModels::estimate(&data).unwrap();
    let fits = Regime::all()
        .iter()
        .map(|r| PropensityFits::estimate(&data, r, gc.clone(), DEFAULT_DELTA_G).unwrap())
        .collect();
    (data, fits)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn propensity_does_not_increase_with_visits(seed in 0u64..1000) {
        let (data, fits) = simulated_fits(seed);
        for f in &fits {
            for r in data.records().iter().filter(|r| r.attended_through(3)) {
                let p: Vec<f64> = (0..=3).map(|t| f.regime_propensity(r, t).unwrap().value).collect();
                prop_assert!(p.windows(2).all(|w| w[1] <= w[0]), "{:?}", p);
            }
        }
    }

    #[test]
    fn stage_one_factor_is_exactly_one_when_ineligible(seed in 0u64..1000, y0 in 0u32..12, y1 in 0u32..12) {
        prop_assume!(y1 < y0 || y1 == 0);
        let (_, fits) = simulated_fits(seed);
        for f in &fits {
            prop_assert_eq!(f.ga1.evaluate(y0, y1), 1.0);
        }
    }
}
