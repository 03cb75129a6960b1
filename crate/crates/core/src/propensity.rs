//! Randomization and attendance probabilities, and the cumulative
//! probability of following a regime through each visit.

use serde::{Deserialize, Serialize};

use crate::data::{SubjectRecord, TrialDataset};
use crate::design::{history_features, to_matrix, Layout};
use crate::error::{Error, Result};
use crate::glm::{fit_glm, predict_glm, Family, GlmFit, GlmSpec};
use crate::regime::{step_up_eligible, Arm, Regime, Stage1Policy};

pub const DEFAULT_DELTA_G: f64 = 0.01;

/// Empirical proportion of subjects randomized to the regime's stage-0 arm.
pub fn estimate_ga0(data: &TrialDataset, regime: &Regime) -> Result<f64> {
    let k = data
        .records()
        .iter()
        .filter(|r| r.a0 == regime.stage0_arm)
        .count();
    if k == 0 {
        return Err(Error::Estimation(format!(
            "no subjects randomized to arm {} (regime {})",
            regime.stage0_arm, regime.label
        )));
    }
    Ok(k as f64 / data.n() as f64)
}

/// Stage-1 assignment probability: on step-up-eligible histories, the share
/// of eligible attendees of the stage-0 arm who received the regime's arm;
/// exactly one elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageOneAssignment {
    pub eligible_probability: f64,
}

impl StageOneAssignment {
    pub fn evaluate(&self, y0: u32, y1: u32) -> f64 {
        if step_up_eligible(y0, y1) {
            self.eligible_probability
        } else {
            1.0
        }
    }
}

pub fn estimate_ga1(data: &TrialDataset, regime: &Regime) -> Result<StageOneAssignment> {
    if !regime.has_stage1_randomization() {
        return Ok(StageOneAssignment { eligible_probability: 1.0 });
    }
    let arm = regime.stage0_arm;
    let (mut eligible, mut consistent) = (0usize, 0usize);
    for r in data.records() {
        let (Some(y1), Some(a1)) = (r.y1, r.a1) else { continue };
        if r.a0 != arm || !r.c1 || !step_up_eligible(r.y0, y1) {
            continue;
        }
        eligible += 1;
        let wanted = match regime.stage1_policy {
            Stage1Policy::StepUp => Arm::ECoaching,
            Stage1Policy::Static(a) => a,
        };
        consistent += usize::from(a1 == wanted);
    }
    if eligible == 0 {
        return Err(Error::Estimation(format!(
            "no step-up-eligible attendees in arm {arm} (regime {})",
            regime.label
        )));
    }
    Ok(StageOneAssignment {
        eligible_probability: consistent as f64 / eligible as f64,
    })
}

/// Pooled main-terms logistic model for attending visit `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttendanceModel {
    pub visit: usize,
    /// `None` when the outcome was degenerate and a constant is used.
    pub fit: Option<GlmFit>,
    pub constant: Option<f64>,
    pub degenerate: bool,
    pub converged: bool,
    pub n_fit: usize,
}

impl AttendanceModel {
    pub fn evaluate(&self, features: &[f64]) -> Result<f64> {
        if let Some(p) = self.constant {
            return Ok(p);
        }
        let fit = self.fit.as_ref().expect("non-constant model has a fit");
        let mut row = vec![1.0];
        row.extend_from_slice(features);
        let x = to_matrix(&[row], features.len() + 1);
        Ok(predict_glm(fit, &GlmSpec::new(Family::Logistic), &x, None)?[0])
    }
}

/// Fit the attendance model for visit `t` among subjects who attended every
/// earlier visit.
pub fn estimate_gc(data: &TrialDataset, t: usize) -> Result<AttendanceModel> {
    if !(1..=3).contains(&t) {
        return Err(Error::Input(format!("attendance visit must be 1, 2 or 3 (got {t})")));
    }
    let layout = Layout::of(data);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for r in data.records().iter().filter(|r| r.attended_through(t - 1)) {
        let a1 = r.a1.unwrap_or(r.a0);
        let mut row = vec![1.0];
        row.extend(history_features(t, r.a0, a1, r, layout)?);
        rows.push(row);
        y.push(f64::from(u8::from(r.attended_through(t))));
    }
    // Nobody at risk: the model is never needed, so any constant will do.
    let mean = if y.is_empty() { 1.0 } else { y.iter().sum::<f64>() / y.len() as f64 };
    if mean == 0.0 || mean == 1.0 {
        return Ok(AttendanceModel {
            visit: t,
            fit: None,
            constant: Some(mean),
            degenerate: true,
            converged: true,
            n_fit: y.len(),
        });
    }
    let x = to_matrix(&rows, layout.width(t) + 1);
    let fit = fit_glm(&GlmSpec::new(Family::Logistic), &x, &y, None, None)?;
    Ok(AttendanceModel {
        visit: t,
        converged: fit.converged,
        fit: Some(fit),
        constant: None,
        degenerate: false,
        n_fit: y.len(),
    })
}

/// The three attendance models; regime-independent and shareable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttendanceModels {
    pub models: [AttendanceModel; 3],
}

impl AttendanceModels {
    pub fn estimate(data: &TrialDataset) -> Result<Self> {
        Ok(AttendanceModels {
            models: [estimate_gc(data, 1)?, estimate_gc(data, 2)?, estimate_gc(data, 3)?],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFits {
    pub regime: Regime,
    pub ga0: f64,
    pub ga1: StageOneAssignment,
    pub gc: AttendanceModels,
    pub delta_g: f64,
    pub layout: Layout,
}

/// Cumulative regime propensity and how many of its factors were truncated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Propensity {
    pub value: f64,
    pub truncated: usize,
}

impl PropensityFits {
    pub fn estimate(
        data: &TrialDataset,
        regime: &Regime,
        gc: AttendanceModels,
        delta_g: f64,
    ) -> Result<Self> {
        if !(delta_g > 0.0 && delta_g < 1.0) {
            return Err(Error::Config(format!("truncation bound {delta_g} must lie in (0, 1)")));
        }
        Ok(PropensityFits {
            regime: *regime,
            ga0: estimate_ga0(data, regime)?,
            ga1: estimate_ga1(data, regime)?,
            gc,
            delta_g,
            layout: Layout::of(data),
        })
    }

    /// Probability of following the regime and attending through visit `t`,
    /// evaluated on the record's covariate history with the arms set to the
    /// regime's; each factor is truncated below at `delta_g`.
    pub fn regime_propensity(&self, record: &SubjectRecord, t: usize) -> Result<Propensity> {
        let r0 = self.regime.stage0_arm;
        let mut factors = vec![self.ga0];
        let mut a1 = r0;
        if t >= 2 {
            let y1 = record.y1.ok_or_else(|| Error::Validation {
                ids: vec![record.id.clone()],
                reason: "y1 needed for the stage-1 propensity but absent".into(),
            })?;
            a1 = self.regime.stage1_arm(record.y0, y1);
            factors.push(self.ga1.evaluate(record.y0, y1));
        }
        for s in 1..=t.min(3) {
            let f = history_features(s, r0, a1, record, self.layout)?;
            factors.push(self.gc.models[s - 1].evaluate(&f)?);
        }
        let truncated = factors.iter().filter(|&&f| f < self.delta_g).count();
        let value = factors.iter().map(|f| f.max(self.delta_g)).product();
        Ok(Propensity { value, truncated })
    }
}
