//! Treatment arms, the step-up rule and the five interventions of interest.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intervention arm codes as recorded in the trial data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Arm {
    Control = 0,
    Text = 1,
    Webapp = 2,
    ECoaching = 3,
}

impl Arm {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Arm::Control),
            1 => Ok(Arm::Text),
            2 => Ok(Arm::Webapp),
            3 => Ok(Arm::ECoaching),
            other => Err(Error::Input(format!("invalid arm code {other}"))),
        }
    }

    /// Arms that can be assigned at enrollment.
    pub fn is_initial(self) -> bool {
        self != Arm::ECoaching
    }
}

impl From<Arm> for u8 {
    fn from(arm: Arm) -> u8 {
        arm.code()
    }
}

impl TryFrom<u8> for Arm {
    type Error = Error;
    fn try_from(code: u8) -> Result<Self> {
        Arm::from_code(code)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// Whether a participant is eligible for re-randomization at the first
/// follow-up visit: some risk behaviour and no improvement over baseline.
pub fn step_up_eligible(y0: u32, y1: u32) -> bool {
    y1 >= y0 && y1 != 0
}

/// The step-up rule `d(a0, y0, y1)`.
pub fn evaluate_rule_d(a0: Arm, y0: u32, y1: u32) -> Result<Arm> {
    match a0 {
        Arm::Control => Ok(Arm::Control),
        Arm::Text | Arm::Webapp => {
            if step_up_eligible(y0, y1) {
                Ok(Arm::ECoaching)
            } else {
                Ok(a0)
            }
        }
        Arm::ECoaching => Err(Error::Input(
            "step-up rule is undefined for an initial eCoaching assignment".into(),
        )),
    }
}

/// Labels of the five interventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegimeLabel {
    I,
    II,
    IIA,
    III,
    IIIA,
}

impl RegimeLabel {
    pub const ALL: [RegimeLabel; 5] = [
        RegimeLabel::I,
        RegimeLabel::II,
        RegimeLabel::IIA,
        RegimeLabel::III,
        RegimeLabel::IIIA,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegimeLabel::I => "I",
            RegimeLabel::II => "II",
            RegimeLabel::IIA => "IIA",
            RegimeLabel::III => "III",
            RegimeLabel::IIIA => "IIIA",
        }
    }
}

impl fmt::Display for RegimeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegimeLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().trim_matches(|c| c == '(' || c == ')') {
            "I" => Ok(RegimeLabel::I),
            "II" => Ok(RegimeLabel::II),
            "IIA" => Ok(RegimeLabel::IIA),
            "III" => Ok(RegimeLabel::III),
            "IIIA" => Ok(RegimeLabel::IIIA),
            other => Err(Error::Input(format!("unknown regime label '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage1Policy {
    Static(Arm),
    StepUp,
}

/// A dynamic treatment regime: stage-0 arm plus stage-1 policy, with
/// attendance at every visit enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regime {
    pub label: RegimeLabel,
    pub stage0_arm: Arm,
    pub stage1_policy: Stage1Policy,
}

impl Regime {
    pub fn new(label: RegimeLabel) -> Self {
        let (stage0_arm, stage1_policy) = match label {
            RegimeLabel::I => (Arm::Control, Stage1Policy::Static(Arm::Control)),
            RegimeLabel::II => (Arm::Text, Stage1Policy::StepUp),
            RegimeLabel::IIA => (Arm::Text, Stage1Policy::Static(Arm::Text)),
            RegimeLabel::III => (Arm::Webapp, Stage1Policy::StepUp),
            RegimeLabel::IIIA => (Arm::Webapp, Stage1Policy::Static(Arm::Webapp)),
        };
        Regime {
            label,
            stage0_arm,
            stage1_policy,
        }
    }

    pub fn all() -> [Regime; 5] {
        RegimeLabel::ALL.map(Regime::new)
    }

    /// Stage-1 arm the regime assigns to someone who started on its stage-0
    /// arm with baseline count `y0` and first follow-up count `y1`.
    pub fn stage1_arm(&self, y0: u32, y1: u32) -> Arm {
        self.companion_stage1_arm(self.stage0_arm, y0, y1)
    }

    /// Stage-1 arm under the same kind of policy applied to a different
    /// stage-0 arm: the step-up rule stays the step-up rule, a static "stay"
    /// policy keeps the participant on `a0`. Used for pooled regressions.
    pub fn companion_stage1_arm(&self, a0: Arm, y0: u32, y1: u32) -> Arm {
        match self.stage1_policy {
            Stage1Policy::StepUp => {
                evaluate_rule_d(a0, y0, y1).expect("stage-0 arms are never eCoaching")
            }
            Stage1Policy::Static(arm) if a0 == self.stage0_arm => arm,
            Stage1Policy::Static(_) => a0,
        }
    }

    pub fn is_step_up(&self) -> bool {
        matches!(self.stage1_policy, Stage1Policy::StepUp)
    }

    /// Whether the regime ever involves a stage-1 randomization.
    pub fn has_stage1_randomization(&self) -> bool {
        self.stage0_arm != Arm::Control
    }
}

/// A difference of two counterfactual means, `E[Y^minuend] - E[Y^subtrahend]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Contrast {
    pub minuend: RegimeLabel,
    pub subtrahend: RegimeLabel,
}

impl Contrast {
    pub fn new(minuend: RegimeLabel, subtrahend: RegimeLabel) -> Self {
        Contrast {
            minuend,
            subtrahend,
        }
    }

    /// The primary and secondary contrasts of the trial.
    pub fn table() -> [Contrast; 6] {
        use RegimeLabel::*;
        [
            Contrast::new(II, I),
            Contrast::new(III, I),
            Contrast::new(IIA, I),
            Contrast::new(IIIA, I),
            Contrast::new(II, IIA),
            Contrast::new(III, IIIA),
        ]
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.minuend, self.subtrahend)
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.minuend, self.subtrahend)
    }
}

impl FromStr for Contrast {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(|c| c == '-' || c == ':')
            .ok_or_else(|| Error::Input(format!("contrast '{s}' must look like 'II-I'")))?;
        Ok(Contrast::new(a.parse()?, b.parse()?))
    }
}
