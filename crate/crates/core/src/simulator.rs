//! Trial data-generating process, Monte Carlo regime truths and the power
//! study.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SubjectRecord, TrialDataset};
use crate::error::{Error, Result};
use crate::inference::{contrast_test_with, VarianceForm};
use crate::propensity::AttendanceModels;
use crate::regime::{evaluate_rule_d, Arm, Contrast, Regime, RegimeLabel};
use crate::tmle::{estimate_with_attendance, TmleConfig};

/// Floor applied to the previous count in the outcome mean.
pub const COUNT_FLOOR: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub n: usize,
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma_w: f64,
    /// Logit of the per-visit probability of missing the visit.
    pub alpha0: f64,
    /// Coefficient of `W0` in the missingness logit (0 in the standard design).
    pub miss_w: f64,
    /// Coefficient of `Y_{t-1}` in the missingness logit (0 in the standard design).
    pub miss_y: f64,
    pub step_up_prob: f64,
    pub seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            n: 250,
            gamma0: 1.5f64.ln(),
            gamma1: 0.0,
            gamma2: 0.0,
            gamma3: 0.0,
            gamma_w: 0.0,
            alpha0: -4.06,
            miss_w: 0.0,
            miss_y: 0.0,
            step_up_prob: 0.5,
            seed: 1,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gamma0, self.gamma1, self.gamma2, self.gamma3, self.gamma_w, self.alpha0, self.miss_w,
            self.miss_y, self.step_up_prob,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("simulation parameters must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.step_up_prob) {
            return Err(Error::Config("step-up probability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Log rate ratio of the arm driving the next outcome.
    pub fn arm_effect(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Control => 0.0,
            Arm::Text => self.gamma1,
            Arm::Webapp => self.gamma2,
            Arm::ECoaching => self.gamma3,
        }
    }

    fn rate(&self, previous: u32, arm: Arm, w0: f64) -> f64 {
        f64::from(previous).max(COUNT_FLOOR) * (self.arm_effect(arm) + self.gamma_w * w0).exp()
    }

    fn miss_probability(&self, w0: f64, previous: u32) -> f64 {
        expit(self.alpha0 + self.miss_w * w0 + self.miss_y * f64::from(previous))
    }
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of replication `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as u32
}

struct Latent {
    w0: f64,
    y: [u32; 4],
    a0: Arm,
    a1: Arm,
}

/// Draw one subject's full latent trajectory. `intervention` fixes the arms
/// (step-up applied deterministically for step-up regimes); otherwise arms
/// follow the randomization design.
fn draw_latent(params: &SimParams, rng: &mut ChaCha8Rng, intervention: Option<&Regime>) -> Latent {
    let w0 = f64::from(u8::from(rng.random::<f64>() < 0.5));
    let y0 = poisson(rng, params.gamma0.exp());
    let randomized = Arm::from_code(rng.random_range(0..3u8)).unwrap();
    let a0 = intervention.map_or(randomized, |r| r.stage0_arm);
    let y1 = poisson(rng, params.rate(y0, a0, w0));
    let step = rng.random::<f64>() < params.step_up_prob;
    let a1 = match intervention {
        Some(r) => r.stage1_arm(y0, y1),
        None => {
            let d = evaluate_rule_d(a0, y0, y1).unwrap();
            if d == Arm::ECoaching && step { d } else { a0 }
        }
    };
    let y2 = poisson(rng, params.rate(y1, a1, w0));
    let y3 = poisson(rng, params.rate(y2, a1, w0));
    Latent { w0, y: [y0, y1, y2, y3], a0, a1 }
}

/// Simulate one trial. Outcomes and arms come from one random stream and the
/// attendance draws from another, both derived from `seed`.
pub fn simulate_trial(params: &SimParams, seed: u64) -> Result<TrialDataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut miss_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x6d69_7373));
    let mut records = Vec::with_capacity(params.n);
    for i in 0..params.n {
        let l = draw_latent(params, &mut rng, None);
        let mut c = [true; 4];
        for t in 1..=3 {
            let u: f64 = miss_rng.random();
            c[t] = c[t - 1] && u >= params.miss_probability(l.w0, l.y[t - 1]);
        }
        // A subject not seen at visit 1 is never re-randomized.
        let a1 = if c[1] { Some(l.a1) } else { None };
        records.push(SubjectRecord {
            id: format!("s{}", i + 1),
            w0: l.w0,
            y0: l.y[0],
            a0: l.a0,
            c1: c[1],
            w1: None,
            y1: c[1].then_some(l.y[1]),
            a1,
            c2: c[2],
            w2: None,
            y2: c[2].then_some(l.y[2]),
            c3: c[3],
            y3: c[3].then_some(l.y[3]),
        });
    }
    TrialDataset::new(records)
}

/// Monte Carlo mean and standard error of `Y1 + Y2 + Y3` under `regime`
/// with attendance enforced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthEstimate {
    pub mean: f64,
    pub se: f64,
}

const TRUTH_CHUNK: usize = 10_000;

pub fn true_regime_mean_mc(params: &SimParams, regime: &Regime, n_mc: usize, seed: u64) -> Result<TruthEstimate> {
    params.validate()?;
    if n_mc < 2 {
        return Err(Error::Input("Monte Carlo truth needs at least two draws".into()));
    }
    let chunks = n_mc.div_ceil(TRUTH_CHUNK);
    let sums: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
            let size = TRUTH_CHUNK.min(n_mc - c * TRUTH_CHUNK);
            (0..size).fold((0.0, 0.0), |(s, s2), _| {
                let l = draw_latent(params, &mut rng, Some(regime));
                let total = f64::from(l.y[1] + l.y[2] + l.y[3]);
                (s + total, s2 + total * total)
            })
        })
        .collect();
    let (s, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let m = n_mc as f64;
    let mean = s / m;
    let var = (s2 / m - mean * mean) * m / (m - 1.0);
    Ok(TruthEstimate { mean, se: (var.max(0.0) / m).sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerStudyConfig {
    pub grid: Vec<SimParams>,
    pub contrasts: Vec<Contrast>,
    pub reps: usize,
    pub alpha: f64,
    pub tmle: TmleConfig,
    pub variance: VarianceForm,
    pub master_seed: u64,
    /// Monte Carlo draws per regime for the true effects.
    pub n_truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCell {
    pub params: SimParams,
    pub contrast: Contrast,
    pub true_effect: f64,
    pub reps: usize,
    pub rejections: usize,
    /// Rejections over successful replications.
    pub power: f64,
    pub mc_se: f64,
    pub failures: usize,
    pub mean_estimate: f64,
    /// More than 2% of replications failed.
    pub flagged: bool,
}

pub const FAILURE_FLAG_RATE: f64 = 0.02;

/// Per-replication outcome for each contrast: `Some((estimate, reject))`, or
/// `None` when estimation failed.
pub type ReplicationResult = Vec<Option<(f64, bool)>>;

/// Analyse one simulated trial end to end.
pub fn analyse_replication(
    params: &SimParams,
    seed: u64,
    contrasts: &[Contrast],
    tmle: &TmleConfig,
    alpha: f64,
    variance: VarianceForm,
) -> ReplicationResult {
    let failed = vec![None; contrasts.len()];
    let Ok(data) = simulate_trial(params, seed) else { return failed };
    let Ok(gc) = AttendanceModels::estimate(&data) else { return failed };
    let mut labels: Vec<RegimeLabel> = contrasts.iter().flat_map(|c| [c.minuend, c.subtrahend]).collect();
    labels.sort();
    labels.dedup();
    let fits: Vec<(RegimeLabel, Option<_>)> = labels
        .iter()
        .map(|&l| (l, estimate_with_attendance(&data, &Regime::new(l), &gc, tmle).ok()))
        .collect();
    let get = |l: RegimeLabel| fits.iter().find(|(k, _)| *k == l).and_then(|(_, f)| f.as_ref());
    contrasts
        .iter()
        .map(|c| {
            let (f1, f2) = (get(c.minuend)?, get(c.subtrahend)?);
            contrast_test_with(f1, f2, alpha, variance).ok().map(|r| (r.estimate, r.reject))
        })
        .collect()
}

/// Replications of every grid cell, run in parallel. Replication `r` uses
/// the same derived seed in every cell.
pub fn run_power_study(config: &PowerStudyConfig) -> Result<Vec<PowerCell>> {
    if config.reps == 0 {
        return Err(Error::Config("power study needs at least one replication".into()));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::Config(format!("alpha {} must lie in (0, 1)", config.alpha)));
    }
    let mut cells = Vec::new();
    for params in &config.grid {
        params.validate()?;
        let truth_seed = derive_seed(config.master_seed, u64::MAX);
        let mut truths: Vec<(RegimeLabel, f64)> = Vec::new();
        for c in &config.contrasts {
            for l in [c.minuend, c.subtrahend] {
                if !truths.iter().any(|(k, _)| *k == l) {
                    let t = true_regime_mean_mc(params, &Regime::new(l), config.n_truth, truth_seed)?;
                    truths.push((l, t.mean));
                }
            }
        }
        let truth = |l: RegimeLabel| truths.iter().find(|(k, _)| *k == l).unwrap().1;
        let results: Vec<ReplicationResult> = (0..config.reps)
            .into_par_iter()
            .map(|r| {
                let seed = derive_seed(config.master_seed, r as u64);
                analyse_replication(params, seed, &config.contrasts, &config.tmle, config.alpha, config.variance)
            })
            .collect();
        for (k, c) in config.contrasts.iter().enumerate() {
            let ok: Vec<(f64, bool)> = results.iter().filter_map(|r| r[k]).collect();
            let failures = config.reps - ok.len();
            let rejections = ok.iter().filter(|(_, rej)| *rej).count();
            let m = ok.len();
            let power = if m == 0 { f64::NAN } else { rejections as f64 / m as f64 };
            cells.push(PowerCell {
                params: params.clone(),
                contrast: *c,
                true_effect: truth(c.minuend) - truth(c.subtrahend),
                reps: config.reps,
                rejections,
                power,
                mc_se: if m == 0 { f64::NAN } else { (power * (1.0 - power) / m as f64).sqrt() },
                failures,
                mean_estimate: if m == 0 { f64::NAN } else { ok.iter().map(|(e, _)| e).sum::<f64>() / m as f64 },
                flagged: failures as f64 > FAILURE_FLAG_RATE * config.reps as f64,
            });
        }
    }
    Ok(cells)
}

pub const POWER_CSV_HEADER: [&str; 13] = [
    "gamma1", "gamma2", "gamma3", "alpha0", "n", "contrast", "true_effect", "reps", "rejections", "power", "mc_se",
    "failures", "flagged",
];

pub fn write_power_csv<W: std::io::Write>(cells: &[PowerCell], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(POWER_CSV_HEADER)?;
    for c in cells {
        w.write_record([
            c.params.gamma1.to_string(),
            c.params.gamma2.to_string(),
            c.params.gamma3.to_string(),
            c.params.alpha0.to_string(),
            c.params.n.to_string(),
            c.contrast.label(),
            format!("{:.6}", c.true_effect),
            c.reps.to_string(),
            c.rejections.to_string(),
            format!("{:.6}", c.power),
            format!("{:.6}", c.mc_se),
            c.failures.to_string(),
            c.flagged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
