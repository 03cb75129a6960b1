//! Sequential-regression targeted estimation of a regime-specific mean of
//! the cumulative outcome `Y1 + Y2 + Y3`.
//!
//! Working backwards from visit 3, each stage fits an initial pooled
//! regression of the stage pseudo-outcome, then updates it along a logistic
//! submodel on the unit-scaled outcome whose only covariate is the clever
//! covariate `H_t`. The update solves the stage estimating equation
//! `sum_i H_t,i (P_t,i - Q*_t,i) = 0` exactly, which makes the plug-in mean of
//! the stage-1 fit a targeted estimator.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{follows_regime, SubjectRecord, TrialDataset};
use crate::design::{history_features, to_matrix, Layout};
use crate::error::{Error, Result};
use crate::glm::{fit_glm, Family, GlmSpec};
use crate::propensity::{AttendanceModels, PropensityFits, DEFAULT_DELTA_G};
use crate::regime::{Arm, Regime};
use crate::superlearner::{fit_superlearner, sl_predict, Candidate, FittedCandidate, SlFit, SlLibrary};

pub const DEFAULT_DELTA_Y: f64 = 0.005;
pub const DEFAULT_MIN_N: usize = 30;

/// How the initial outcome regressions are fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OutcomeLearner {
    Single(Candidate),
    SuperLearner(SlLibrary),
}

enum OutcomeModel {
    Single(FittedCandidate),
    Ensemble(SlFit),
}

impl OutcomeLearner {
    fn fit(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<OutcomeModel> {
        match self {
            OutcomeLearner::Single(c) => c.fit(x, y, None).map(OutcomeModel::Single),
            OutcomeLearner::SuperLearner(lib) => {
                fit_superlearner(lib, x, y, None).map(OutcomeModel::Ensemble)
            }
        }
    }
}

impl OutcomeModel {
    fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let raw = match self {
            OutcomeModel::Single(f) => f.predict(x)?,
            OutcomeModel::Ensemble(f) => sl_predict(f, x)?,
        };
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Estimation("initial regression produced non-finite values".into()));
        }
        Ok(raw.into_iter().map(|v| v.max(0.0)).collect())
    }

    fn summary(&self) -> Option<Vec<(String, f64)>> {
        match self {
            OutcomeModel::Single(_) => None,
            OutcomeModel::Ensemble(f) => {
                Some(f.names.iter().cloned().zip(f.weights.iter().copied()).collect())
            }
        }
    }

    fn failed(&self) -> Vec<String> {
        match self {
            OutcomeModel::Single(_) => Vec::new(),
            OutcomeModel::Ensemble(f) => f
                .names
                .iter()
                .zip(&f.failed)
                .filter(|(_, &bad)| bad)
                .map(|(n, _)| n.clone())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmleConfig {
    pub learner: OutcomeLearner,
    pub delta_g: f64,
    pub delta_y: f64,
    pub min_n: usize,
}

impl TmleConfig {
    /// Poisson GLM initial regressions.
    pub fn glm() -> Self {
        Self::with_learner(OutcomeLearner::Single(Candidate::Glm(GlmSpec::new(Family::Poisson))))
    }

    pub fn superlearner(seed: u64) -> Self {
        Self::with_learner(OutcomeLearner::SuperLearner(SlLibrary::standard(seed)))
    }

    pub fn with_learner(learner: OutcomeLearner) -> Self {
        TmleConfig {
            learner,
            delta_g: DEFAULT_DELTA_G,
            delta_y: DEFAULT_DELTA_Y,
            min_n: DEFAULT_MIN_N,
        }
    }
}

impl Default for TmleConfig {
    fn default() -> Self {
        Self::superlearner(0)
    }
}

/// One row of a stacked dataset. Every subject contributes one row per arm
/// combination `(1,d(1)), (2,d(2)), (1,1), (2,2), (0,0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedRow {
    pub subject: usize,
    pub a0: Arm,
    /// `None` when the combination needs the step-up rule and `y1` is absent.
    pub a1: Option<Arm>,
    /// `Y_t + Q*_{t+1}(a0, a1, history)`, present when `C̄_t = 1`.
    pub pseudo_outcome: Option<f64>,
    /// Whether the row enters the stage regression.
    pub usable: bool,
}

fn combos(record: &SubjectRecord) -> [(Arm, Option<Arm>); 5] {
    let d = |a0: Arm| record.y1.map(|y1| crate::regime::evaluate_rule_d(a0, record.y0, y1).unwrap());
    [
        (Arm::Text, d(Arm::Text)),
        (Arm::Webapp, d(Arm::Webapp)),
        (Arm::Text, Some(Arm::Text)),
        (Arm::Webapp, Some(Arm::Webapp)),
        (Arm::Control, Some(Arm::Control)),
    ]
}

/// Arms a subject's own stage-`t` regression row is evaluated at: the
/// recorded pair at stage 2; at stage 1 the recorded `a0` together with the
/// regime's companion stage-1 arm.
fn own_arms(record: &SubjectRecord, regime: &Regime, stage: usize) -> Option<(Arm, Arm)> {
    let y1 = record.y1?;
    Some(match stage {
        1 => (record.a0, regime.companion_stage1_arm(record.a0, record.y0, y1)),
        _ => (record.a0, record.a1?),
    })
}

/// Build the `5n`-row stacked dataset for stage `t` (1 or 2). `upstream`
/// evaluates the updated stage-`t+1` regression for a batch of
/// `(subject, a0, a1)` triples.
///
/// Rows are ordered combination-major: the first `n` rows carry
/// `(1, d(1, y0, y1))`, the next `n` carry `(2, d(2, y0, y1))`, and so on.
/// A row is usable for fitting only if the subject attended through `t` and
/// the combination is the first one equal to the subject's own arms, so the
/// pooled fit is a regression on the observed treatment history.
pub fn build_stacked_dataset<F>(
    data: &TrialDataset,
    stage: usize,
    regime: &Regime,
    upstream: F,
) -> Result<Vec<StackedRow>>
where
    F: Fn(&[(usize, Arm, Arm)]) -> Result<Vec<f64>>,
{
    if !(1..=2).contains(&stage) {
        return Err(Error::Input(format!("stacked datasets exist for stages 1 and 2, not {stage}")));
    }
    let recs = data.records();
    let n = recs.len();
    let per_subject: Vec<[(Arm, Option<Arm>); 5]> = recs.iter().map(combos).collect();
    let mut rows = Vec::with_capacity(5 * n);
    let mut queries = Vec::new();
    for k in 0..5 {
        for (i, r) in recs.iter().enumerate() {
            let (a0, a1) = per_subject[i][k];
            let mut usable = false;
            if r.attended_through(stage) {
                if let (Some(a1), Some(own)) = (a1, own_arms(r, regime, stage)) {
                    queries.push((i, a0, a1));
                    let first = per_subject[i].iter().position(|&(b0, b1)| (b0, b1) == (own.0, Some(own.1)));
                    usable = first == Some(k);
                }
            }
            rows.push(StackedRow { subject: i, a0, a1, pseudo_outcome: None, usable });
        }
    }
    let values = upstream(&queries)?;
    let mut it = values.into_iter();
    for row in rows.iter_mut() {
        let r = &recs[row.subject];
        if r.attended_through(stage) && row.a1.is_some() && own_arms(r, regime, stage).is_some() {
            let y = if stage == 1 { r.y1 } else { r.y2 };
            let q = it.next().ok_or_else(|| Error::Dimension("upstream returned too few values".into()))?;
            row.pseudo_outcome = Some(f64::from(y.expect("attended visit has an outcome")) + q);
        }
    }
    Ok(rows)
}

/// `H_t`: indicator of following the regime and attending through visit `t`,
/// over the cumulative regime propensity.
pub fn clever_covariate(fits: &PropensityFits, record: &SubjectRecord, t: usize) -> Result<f64> {
    let through = if t == 1 { 0 } else { 1 };
    if !record.attended_through(t) || !follows_regime(record, &fits.regime, through) {
        return Ok(0.0);
    }
    Ok(1.0 / fits.regime_propensity(record, t)?.value)
}

fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn offset(initial: f64, scale: f64, delta_y: f64) -> f64 {
    logit((initial / scale).clamp(delta_y, 1.0 - delta_y))
}

/// Updated fit `s * expit(logit(clamp(Q/s)) + eps * H)`.
pub fn augment(initial: f64, h: f64, epsilon: f64, scale: f64, delta_y: f64) -> f64 {
    scale * expit(offset(initial, scale, delta_y) + epsilon * h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fluctuation {
    pub epsilon: f64,
    pub converged: bool,
    /// Unscaled score `sum H (P - Q*)` at the returned epsilon.
    pub score: f64,
}

/// Fit the one-parameter logistic submodel with offset `logit(clamp(Q/s))`
/// and covariate `H` to the scaled pseudo-outcomes. Only the offset is
/// clamped; the response is `P/s` as is, so the score equation holds for the
/// unclamped outcomes. Falls back to `epsilon = 0` if the fit diverges.
pub fn fluctuate(
    initial: &[f64],
    h: &[f64],
    pseudo: &[f64],
    scale: f64,
    delta_y: f64,
) -> Result<Fluctuation> {
    if initial.len() != h.len() || h.len() != pseudo.len() {
        return Err(Error::Dimension("fluctuation inputs differ in length".into()));
    }
    if !(scale > 0.0) || h.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::Input("fluctuation needs a positive scale and finite H >= 0".into()));
    }
    let rows: Vec<usize> = (0..h.len()).filter(|&i| h[i] > 0.0).collect();
    if rows.is_empty() {
        return Ok(Fluctuation { epsilon: 0.0, converged: true, score: 0.0 });
    }
    let o: Vec<f64> = rows.iter().map(|&i| offset(initial[i], scale, delta_y)).collect();
    let y: Vec<f64> = rows.iter().map(|&i| pseudo[i] / scale).collect();
    if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("scaled pseudo-outcomes must lie in [0, 1]".into()));
    }
    let hv: Vec<f64> = rows.iter().map(|&i| h[i]).collect();
    let x = DMatrix::from_column_slice(hv.len(), 1, &hv);

    let score_at = |eps: f64| -> f64 {
        (0..hv.len()).map(|k| hv[k] * (y[k] - expit(o[k] + eps * hv[k]))).sum()
    };
    let loglik = |eps: f64| -> f64 {
        (0..hv.len())
            .map(|k| {
                let eta = o[k] + eps * hv[k];
                // y log p + (1-y) log(1-p) = y eta - log(1 + e^eta)
                let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
                y[k] * eta - softplus
            })
            .sum()
    };

    let start = fit_glm(&GlmSpec::new(Family::Logistic), &x, &y, None, Some(&o))
        .ok()
        .map(|f| f.coefficients[0])
        .filter(|e| e.is_finite())
        .unwrap_or(0.0);
    // Polish with safeguarded Newton steps so the score is zero to rounding.
    let mut eps = start;
    let mut converged = false;
    for _ in 0..200 {
        let s = score_at(eps);
        let info: f64 = (0..hv.len())
            .map(|k| {
                let p = expit(o[k] + eps * hv[k]);
                hv[k] * hv[k] * p * (1.0 - p)
            })
            .sum();
        if s == 0.0 {
            converged = true;
            break;
        }
        if !(info > 0.0) {
            break;
        }
        let mut step = s / info;
        let base = loglik(eps);
        let mut accepted = false;
        for _ in 0..60 {
            if loglik(eps + step) >= base - 1e-12 * base.abs() {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        eps += step;
        if step.abs() <= 1e-15 * (1.0 + eps.abs()) {
            converged = true;
            break;
        }
    }
    let total_h: f64 = hv.iter().sum();
    let score = score_at(eps);
    if !converged && score.abs() <= 1e-12 * total_h {
        converged = true;
    }
    if !converged || !eps.is_finite() || eps.abs() > 1e6 {
        return Ok(Fluctuation { epsilon: 0.0, converged: false, score: scale * score_at(0.0) });
    }
    Ok(Fluctuation { epsilon: eps, converged: true, score: scale * score })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub scale: f64,
    pub epsilon: f64,
    pub fluctuation_converged: bool,
    /// `(1/n) sum_i H_t,i (P_t,i - Q*_t,i)`.
    pub ee_residual: f64,
    pub fit_rows: usize,
    pub fluctuation_rows: usize,
    pub learner_weights: Option<Vec<(String, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub h_min: f64,
    pub h_max: f64,
    pub min_propensity: f64,
    /// Propensity factors raised to the truncation bound, over all followers
    /// and stages.
    pub truncated_factors: usize,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmleFit {
    pub regime: Regime,
    pub psi: f64,
    pub n: usize,
    /// Stages 1, 2, 3 in order.
    pub stages: Vec<StageSummary>,
    /// `H_1, H_2, H_3` per subject.
    pub clever: [Vec<f64>; 3],
    /// Influence components `D_0, D_1, D_2, D_3` per subject.
    pub components: [Vec<f64>; 4],
    /// Updated stage-1 fit at the regime's stage-0 arm, per subject.
    pub qbar1: Vec<f64>,
    pub diagnostics: Diagnostics,
    pub data_fingerprint: u64,
}

/// Machine-readable summary of one regime fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub regime: String,
    pub psi: f64,
    pub n: usize,
    pub epsilon: [f64; 3],
    pub ee_residuals: [f64; 3],
    pub scales: [f64; 3],
    pub h_min: f64,
    pub h_max: f64,
    pub min_propensity: f64,
    pub truncated_factors: usize,
    pub flags: Vec<String>,
    pub learner_weights: Vec<Option<Vec<(String, f64)>>>,
}

impl TmleFit {
    pub fn ee_residuals(&self) -> [f64; 3] {
        [self.stages[0].ee_residual, self.stages[1].ee_residual, self.stages[2].ee_residual]
    }

    pub fn report(&self) -> FitReport {
        let pick = |f: fn(&StageSummary) -> f64| [f(&self.stages[0]), f(&self.stages[1]), f(&self.stages[2])];
        FitReport {
            regime: self.regime.label.to_string(),
            psi: self.psi,
            n: self.n,
            epsilon: pick(|s| s.epsilon),
            ee_residuals: self.ee_residuals(),
            scales: pick(|s| s.scale),
            h_min: self.diagnostics.h_min,
            h_max: self.diagnostics.h_max,
            min_propensity: self.diagnostics.min_propensity,
            truncated_factors: self.diagnostics.truncated_factors,
            flags: self.diagnostics.flags.clone(),
            learner_weights: self.stages.iter().map(|s| s.learner_weights.clone()).collect(),
        }
    }
}

/// Everything needed to evaluate an updated stage regression at arbitrary
/// arms for a given subject.
struct UpdatedStage {
    stage: usize,
    model: OutcomeModel,
    scale: f64,
    epsilon: f64,
    delta_y: f64,
}

struct Context<'a> {
    recs: &'a [SubjectRecord],
    regime: &'a Regime,
    layout: Layout,
    /// `1 / g_t` evaluated with attendance forced, for subjects whose history
    /// allows it.
    h_unc: [Vec<Option<f64>>; 3],
}

impl Context<'_> {
    fn is_regime_arms(&self, i: usize, a0: Arm, a1: Arm) -> bool {
        let r = &self.recs[i];
        a0 == self.regime.stage0_arm
            && r.y1.is_some_and(|y1| a1 == self.regime.stage1_arm(r.y0, y1))
    }

    fn evaluate(&self, stage: &UpdatedStage, queries: &[(usize, Arm, Arm)]) -> Result<Vec<f64>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let t = stage.stage;
        let rows = queries
            .iter()
            .map(|&(i, a0, a1)| history_features(t, a0, a1, &self.recs[i], self.layout))
            .collect::<Result<Vec<_>>>()?;
        let init = stage.model.predict(&to_matrix(&rows, self.layout.width(t)))?;
        queries
            .iter()
            .zip(init)
            .map(|(&(i, a0, a1), q)| {
                let follows = if t == 1 { a0 == self.regime.stage0_arm } else { self.is_regime_arms(i, a0, a1) };
                let h = if follows {
                    self.h_unc[t - 1][i].ok_or_else(|| {
                        Error::Estimation(format!("no stage-{t} propensity for subject {}", self.recs[i].id))
                    })?
                } else {
                    0.0
                };
                Ok(augment(q, h, stage.epsilon, stage.scale, stage.delta_y))
            })
            .collect()
    }
}

/// Estimate the mean cumulative outcome under `regime`, fitting the
/// attendance models from scratch.
pub fn estimate_regime_mean(data: &TrialDataset, regime: &Regime, config: &TmleConfig) -> Result<TmleFit> {
    let gc = AttendanceModels::estimate(data)?;
    estimate_with_attendance(data, regime, &gc, config)
}

/// Estimate several regimes concurrently with shared attendance models.
pub fn estimate_regimes(
    data: &TrialDataset,
    regimes: &[Regime],
    config: &TmleConfig,
) -> Result<Vec<Result<TmleFit>>> {
    let gc = AttendanceModels::estimate(data)?;
    Ok(regimes
        .par_iter()
        .map(|r| estimate_with_attendance(data, r, &gc, config))
        .collect())
}

struct StageOutput {
    summary: StageSummary,
    updated: UpdatedStage,
    /// Per subject with a usable row: (pseudo-outcome, updated own-arm fit).
    own: Vec<Option<(f64, f64)>>,
    flags: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn fit_stage(
    ctx: &Context<'_>,
    config: &TmleConfig,
    stage: usize,
    subjects: &[usize],
    arms: &[(Arm, Arm)],
    pseudo: &[f64],
    h: &[f64],
    n: usize,
) -> Result<StageOutput> {
    let label = ctx.regime.label;
    if !subjects.iter().any(|&i| h[i] > 0.0) {
        return Err(Error::Estimation(format!(
            "no uncensored followers of regime {label} at stage {stage}"
        )));
    }
    let rows = subjects
        .iter()
        .zip(arms)
        .map(|(&i, &(a0, a1))| history_features(stage, a0, a1, &ctx.recs[i], ctx.layout))
        .collect::<Result<Vec<_>>>()?;
    let x = to_matrix(&rows, ctx.layout.width(stage));
    let model = config.learner.fit(&x, pseudo)?;
    let init = model.predict(&x)?;
    let scale = pseudo.iter().copied().fold(1.0, f64::max);
    let hv: Vec<f64> = subjects.iter().map(|&i| h[i]).collect();
    let fl = fluctuate(&init, &hv, pseudo, scale, config.delta_y)?;
    let mut flags: Vec<String> = model
        .failed()
        .into_iter()
        .map(|c| format!("stage {stage}: learner '{c}' excluded"))
        .collect();
    if !fl.converged {
        flags.push(format!("stage {stage}: fluctuation did not converge, epsilon set to 0"));
    }
    let mut own = vec![None; ctx.recs.len()];
    let mut resid = 0.0;
    for (k, &i) in subjects.iter().enumerate() {
        let q = augment(init[k], hv[k], fl.epsilon, scale, config.delta_y);
        own[i] = Some((pseudo[k], q));
        resid += hv[k] * (pseudo[k] - q);
    }
    let summary = StageSummary {
        stage,
        scale,
        epsilon: fl.epsilon,
        fluctuation_converged: fl.converged,
        ee_residual: resid / n as f64,
        fit_rows: subjects.len(),
        fluctuation_rows: hv.iter().filter(|&&v| v > 0.0).count(),
        learner_weights: model.summary(),
    };
    Ok(StageOutput {
        summary,
        updated: UpdatedStage { stage, model, scale, epsilon: fl.epsilon, delta_y: config.delta_y },
        own,
        flags,
    })
}

/// Estimate the mean cumulative outcome under `regime` given fitted
/// attendance models.
pub fn estimate_with_attendance(
    data: &TrialDataset,
    regime: &Regime,
    gc: &AttendanceModels,
    config: &TmleConfig,
) -> Result<TmleFit> {
    let n = data.n();
    if n < config.min_n {
        return Err(Error::Input(format!("need at least {} subjects, got {n}", config.min_n)));
    }
    if !(config.delta_y > 0.0 && config.delta_y < 0.5) {
        return Err(Error::Config(format!("outcome clamp {} must lie in (0, 0.5)", config.delta_y)));
    }
    let fits = PropensityFits::estimate(data, regime, gc.clone(), config.delta_g)?;
    let recs = data.records();
    let layout = Layout::of(data);

    let mut h_unc: [Vec<Option<f64>>; 3] = [vec![None; n], vec![None; n], vec![None; n]];
    let mut clever: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut truncated_factors = 0;
    let mut min_propensity = f64::INFINITY;
    for (i, r) in recs.iter().enumerate() {
        for t in 1..=3 {
            if !r.attended_through(t - 1) || (t >= 2 && r.y1.is_none()) {
                continue;
            }
            let p = fits.regime_propensity(r, t)?;
            h_unc[t - 1][i] = Some(1.0 / p.value);
            let through = if t == 1 { 0 } else { 1 };
            if r.attended_through(t) && follows_regime(r, regime, through) {
                clever[t - 1][i] = 1.0 / p.value;
                truncated_factors += p.truncated;
                min_propensity = min_propensity.min(p.value);
            }
        }
    }
    let ctx = Context { recs, regime, layout, h_unc };
    let mut flags = Vec::new();
    for m in &gc.models {
        if m.degenerate {
            flags.push(format!("attendance model {}: constant probability {}", m.visit, m.constant.unwrap_or(1.0)));
        } else if !m.converged {
            flags.push(format!("attendance model {}: did not converge (near separation)", m.visit));
        }
    }

    // Stage 3: Y3 on own arms and full history among C̄3 = 1.
    let s3: Vec<usize> = (0..n).filter(|&i| recs[i].attended_through(3)).collect();
    let arms3: Vec<(Arm, Arm)> = s3.iter().map(|&i| (recs[i].a0, recs[i].a1.unwrap())).collect();
    let y3: Vec<f64> = s3.iter().map(|&i| f64::from(recs[i].y3.unwrap())).collect();
    let st3 = fit_stage(&ctx, config, 3, &s3, &arms3, &y3, &clever[2], n)?;

    // Stage 2: stacked regression of Y2 + Q*3.
    let stacked2 = build_stacked_dataset(data, 2, regime, |q| ctx.evaluate(&st3.updated, q))?;
    let (s2, arms2, p2) = usable_rows(&stacked2);
    let st2 = fit_stage(&ctx, config, 2, &s2, &arms2, &p2, &clever[1], n)?;

    // Stage 1: stacked regression of Y1 + Q*2 at the companion stage-1 arm.
    let stacked1 = build_stacked_dataset(data, 1, regime, |q| ctx.evaluate(&st2.updated, q))?;
    let (s1, arms1, p1) = usable_rows(&stacked1);
    let st1 = fit_stage(&ctx, config, 1, &s1, &arms1, &p1, &clever[0], n)?;

    let r0 = regime.stage0_arm;
    let all: Vec<(usize, Arm, Arm)> = (0..n).map(|i| (i, r0, r0)).collect();
    let qbar1 = ctx.evaluate(&st1.updated, &all)?;
    let psi = qbar1.iter().sum::<f64>() / n as f64;

    let component = |st: &StageOutput, h: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| match st.own[i] {
                Some((p, q)) if h[i] > 0.0 => h[i] * (p - q),
                _ => 0.0,
            })
            .collect()
    };
    let d0: Vec<f64> = qbar1.iter().map(|q| q - psi).collect();
    let components = [d0, component(&st1, &clever[0]), component(&st2, &clever[1]), component(&st3, &clever[2])];

    let positive: Vec<f64> = clever.iter().flatten().copied().filter(|&v| v > 0.0).collect();
    flags.extend(st1.flags.iter().chain(&st2.flags).chain(&st3.flags).cloned());
    let diagnostics = Diagnostics {
        h_min: positive.iter().copied().fold(f64::INFINITY, f64::min),
        h_max: positive.iter().copied().fold(0.0, f64::max),
        min_propensity,
        truncated_factors,
        flags,
    };
    Ok(TmleFit {
        regime: *regime,
        psi,
        n,
        stages: vec![st1.summary, st2.summary, st3.summary],
        clever,
        components,
        qbar1,
        diagnostics,
        data_fingerprint: data.fingerprint(),
    })
}

fn usable_rows(rows: &[StackedRow]) -> (Vec<usize>, Vec<(Arm, Arm)>, Vec<f64>) {
    let mut subjects = Vec::new();
    let mut arms = Vec::new();
    let mut pseudo = Vec::new();
    for r in rows.iter().filter(|r| r.usable) {
        subjects.push(r.subject);
        arms.push((r.a0, r.a1.expect("usable rows have a stage-1 arm")));
        pseudo.push(r.pseudo_outcome.expect("usable rows have a pseudo-outcome"));
    }
    (subjects, arms, pseudo)
}
