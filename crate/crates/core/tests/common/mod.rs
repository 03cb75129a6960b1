#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smart_tmle::data::{SubjectRecord, TrialDataset};
use smart_tmle::regime::{Arm, RegimeLabel};
use smart_tmle::simulator::SimParams;
use smart_tmle::tmle::TmleFit;

pub const EE_TOL: f64 = 1e-8;

/// Largest absolute estimating-equation residual of a fit.
pub fn max_ee(fit: &TmleFit) -> f64 {
    fit.ee_residuals().iter().fold(0.0, |m, r| m.max(r.abs()))
}

pub fn assert_ee(fit: &TmleFit) {
    let ee = max_ee(fit);
    assert!(ee <= EE_TOL, "estimating equation residual {ee:e} for regime {}", fit.regime.label);
}

/// Stage-0 arm and whether eligible subjects step up, written out
/// independently of the library's regime table.
pub fn regime_spec(label: RegimeLabel) -> (u8, bool) {
    match label {
        RegimeLabel::I => (0, false),
        RegimeLabel::II => (1, true),
        RegimeLabel::IIA => (1, false),
        RegimeLabel::III => (2, true),
        RegimeLabel::IIIA => (2, false),
    }
}

pub fn stage1_arm(label: RegimeLabel, y0: u32, y1: u32) -> u8 {
    let (a0, step) = regime_spec(label);
    if step && y1 >= y0 && y1 != 0 {
        3
    } else {
        a0
    }
}

fn poisson_pmf(lambda: f64, kmax: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(kmax + 1);
    let mut v = (-lambda).exp();
    for k in 0..=kmax {
        p.push(v);
        v *= lambda / (k + 1) as f64;
    }
    p
}

const SUPPORT: usize = 200;

/// Exact `E[Y1 + Y2 + Y3]` under a regime with attendance enforced, by
/// summing over `(w0, y0, y1)` with the last two transitions in closed form:
/// `E[max(Y, 0.2)] = lambda + 0.2 exp(-lambda)` for Poisson `Y`.
pub fn series_regime_mean(p: &SimParams, label: RegimeLabel) -> f64 {
    let gamma = |arm: u8| match arm {
        0 => 0.0,
        1 => p.gamma1,
        2 => p.gamma2,
        _ => p.gamma3,
    };
    let (a0, _) = regime_spec(label);
    let p0 = poisson_pmf(p.gamma0.exp(), SUPPORT);
    let mut total = 0.0;
    for w0 in [0.0, 1.0] {
        let ew = (p.gamma_w * w0).exp();
        let mut acc = 0.0;
        for (y0, &py0) in p0.iter().enumerate() {
            let l1 = (y0 as f64).max(0.2) * gamma(a0).exp() * ew;
            let p1 = poisson_pmf(l1, SUPPORT);
            for (y1, &py1) in p1.iter().enumerate() {
                let r = gamma(stage1_arm(label, y0 as u32, y1 as u32)).exp() * ew;
                let l2 = (y1 as f64).max(0.2) * r;
                let later = l2 + (l2 + 0.2 * (-l2).exp()) * r;
                acc += py0 * py1 * (y1 as f64 + later);
            }
        }
        total += 0.5 * acc;
    }
    total
}

/// `E[max(Y0, 0.2)]` for `Y0 ~ Poisson(lambda)`, summed term by term.
pub fn series_floor_mean(lambda: f64) -> f64 {
    poisson_pmf(lambda, SUPPORT).iter().enumerate().map(|(k, p)| (k as f64).max(0.2) * p).sum()
}

/// Binary-outcome trial with no dropout: `W0, Y0..Y3` in {0, 1}.
pub fn saturated_world(n: usize, seed: u64) -> TrialDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let expit = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let w0 = u8::from(rng.random::<f64>() < 0.5);
        let y0 = u32::from(rng.random::<f64>() < 0.45);
        let a0: u8 = rng.random_range(0..3);
        let draw = |rng: &mut ChaCha8Rng, eta: f64| u32::from(rng.random::<f64>() < expit(eta));
        let y1 = draw(&mut rng, -0.3 + 0.6 * f64::from(y0) + 0.4 * f64::from(w0) - 0.3 * f64::from(a0));
        let eligible = a0 != 0 && y1 >= y0 && y1 != 0;
        let a1 = if eligible && rng.random::<f64>() < 0.5 { 3 } else { a0 };
        let y2 = draw(&mut rng, -0.2 + 0.7 * f64::from(y1) - 0.2 * f64::from(w0) - 0.25 * f64::from(a1));
        let y3 = draw(&mut rng, -0.1 + 0.5 * f64::from(y2) + 0.3 * f64::from(w0) - 0.2 * f64::from(a1));
        records.push(SubjectRecord {
            id: format!("b{i}"),
            w0: f64::from(w0),
            y0,
            a0: Arm::from_code(a0).unwrap(),
            c1: true,
            w1: None,
            y1: Some(y1),
            a1: Some(Arm::from_code(a1).unwrap()),
            c2: true,
            w2: None,
            y2: Some(y2),
            c3: true,
            y3: Some(y3),
        });
    }
    TrialDataset::new(records).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Nonparametric g-computation by enumerating every observed history:
/// iterated empirical conditional means with the arms set by the regime.
/// `None` if some history needed by the regime was never observed.
pub fn enumeration_g_formula(data: &TrialDataset, label: RegimeLabel) -> Option<f64> {
    type Key = (u8, u8, u64, u32, u32, u32);
    let recs = data.records();
    let arm = |a: Arm| a.code();
    let mut y3_cells: HashMap<Key, Vec<f64>> = HashMap::new();
    for r in recs {
        let key = (arm(r.a0), arm(r.a1?), r.w0.to_bits(), r.y0, r.y1?, r.y2?);
        y3_cells.entry(key).or_default().push(f64::from(r.y3?));
    }
    let q3 = |k: &Key| y3_cells.get(k).map(|v| mean(v));

    type Key2 = (u8, u8, u64, u32, u32);
    let mut y2_cells: HashMap<Key2, Vec<f64>> = HashMap::new();
    for r in recs {
        let (a0, a1, y1, y2) = (arm(r.a0), arm(r.a1?), r.y1?, r.y2?);
        let q = q3(&(a0, a1, r.w0.to_bits(), r.y0, y1, y2))?;
        y2_cells.entry((a0, a1, r.w0.to_bits(), r.y0, y1)).or_default().push(f64::from(y2) + q);
    }
    let q2 = |k: &Key2| y2_cells.get(k).map(|v| mean(v));

    let (r0, _) = regime_spec(label);
    let mut y1_cells: HashMap<(u64, u32), Vec<f64>> = HashMap::new();
    for r in recs.iter().filter(|r| arm(r.a0) == r0) {
        let y1 = r.y1?;
        let a1 = stage1_arm(label, r.y0, y1);
        let q = q2(&(r0, a1, r.w0.to_bits(), r.y0, y1))?;
        y1_cells.entry((r.w0.to_bits(), r.y0)).or_default().push(f64::from(y1) + q);
    }
    let mut total = 0.0;
    for r in recs {
        total += mean(y1_cells.get(&(r.w0.to_bits(), r.y0))?);
    }
    Some(total / recs.len() as f64)
}
