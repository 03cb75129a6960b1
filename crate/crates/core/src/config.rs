//! Run configuration: one JSON document, with every command-line flag an
//! override of a dotted key.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::glm::{Family, GlmSpec};
use crate::hal::HalConfig;
use crate::inference::VarianceForm;
use crate::regime::{Contrast, RegimeLabel};
use crate::simulator::SimParams;
use crate::superlearner::{Candidate, SlLibrary};
use crate::tmle::{OutcomeLearner, TmleConfig, DEFAULT_DELTA_Y, DEFAULT_MIN_N};
use crate::propensity::DEFAULT_DELTA_G;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorOptions {
    pub superlearner: bool,
    /// Super-learner library; any of `intercept`, `poisson`, `negbin`, `hal`.
    pub candidates: Vec<String>,
    pub folds: usize,
    pub delta_g: f64,
    pub delta_y: f64,
    pub min_n: usize,
    pub variance: VarianceForm,
    pub hal: HalConfig,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            superlearner: true,
            candidates: ["intercept", "poisson", "negbin", "hal"].map(String::from).to_vec(),
            folds: 5,
            delta_g: DEFAULT_DELTA_G,
            delta_y: DEFAULT_DELTA_Y,
            min_n: DEFAULT_MIN_N,
            variance: VarianceForm::default(),
            hal: HalConfig::default(),
        }
    }
}

impl EstimatorOptions {
    pub fn tmle_config(&self, seed: u64) -> Result<TmleConfig> {
        let learner = if self.superlearner {
            let mut candidates = Vec::new();
            for name in &self.candidates {
                candidates.push(match name.to_ascii_lowercase().as_str() {
                    "intercept" => Candidate::Glm(GlmSpec::new(Family::InterceptOnly)),
                    "poisson" => Candidate::Glm(GlmSpec::new(Family::Poisson)),
                    "negbin" => Candidate::Glm(GlmSpec::new(Family::NegativeBinomial)),
                    "hal" => Candidate::Hal(HalConfig { seed, ..self.hal.clone() }),
                    "saturated" => Candidate::Saturated,
                    other => return Err(Error::Config(format!("unknown learner '{other}'"))),
                });
            }
            if candidates.is_empty() {
                return Err(Error::Config("super learner needs at least one candidate".into()));
            }
            OutcomeLearner::SuperLearner(SlLibrary { candidates, folds: self.folds, seed })
        } else {
            OutcomeLearner::Single(Candidate::Glm(GlmSpec::new(Family::Poisson)))
        };
        Ok(TmleConfig { learner, delta_g: self.delta_g, delta_y: self.delta_y, min_n: self.min_n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateOptions {
    pub data: Option<PathBuf>,
    pub regimes: Vec<RegimeLabel>,
    pub contrasts: Vec<String>,
    pub coerce_monotone: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            data: None,
            regimes: RegimeLabel::ALL.to_vec(),
            contrasts: Contrast::table().iter().map(Contrast::label).collect(),
            coerce_monotone: false,
        }
    }
}

/// Full factorial grid of simulation cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerGrid {
    pub n: Vec<usize>,
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub gamma3: Vec<f64>,
    pub alpha0: Vec<f64>,
    pub gamma0: f64,
    pub gamma_w: f64,
    pub step_up_prob: f64,
    pub contrasts: Vec<String>,
    pub n_truth: usize,
}

impl Default for PowerGrid {
    fn default() -> Self {
        PowerGrid {
            n: vec![200, 250, 300],
            gamma1: vec![0.0, -0.11, -0.22, -0.36],
            gamma2: vec![0.0],
            gamma3: vec![0.0, -0.22, -0.36, -0.69],
            alpha0: vec![-4.06],
            gamma0: 1.5f64.ln(),
            gamma_w: 0.0,
            step_up_prob: 0.5,
            contrasts: vec!["II-I".into()],
            n_truth: 200_000,
        }
    }
}

impl PowerGrid {
    pub fn cells(&self) -> Vec<SimParams> {
        let mut out = Vec::new();
        for &alpha0 in &self.alpha0 {
            for &n in &self.n {
                for &gamma1 in &self.gamma1 {
                    for &gamma2 in &self.gamma2 {
                        for &gamma3 in &self.gamma3 {
                            out.push(SimParams {
                                n,
                                gamma0: self.gamma0,
                                gamma1,
                                gamma2,
                                gamma3,
                                gamma_w: self.gamma_w,
                                alpha0,
                                step_up_prob: self.step_up_prob,
                                ..SimParams::default()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub alpha: f64,
    pub out: PathBuf,
    pub reps: usize,
    pub estimator: EstimatorOptions,
    pub simulate: SimParams,
    pub estimate: EstimateOptions,
    pub power: PowerGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            alpha: 0.05,
            out: PathBuf::from("out"),
            reps: 500,
            estimator: EstimatorOptions::default(),
            simulate: SimParams::default(),
            estimate: EstimateOptions::default(),
            power: PowerGrid::default(),
        }
    }
}

pub fn parse_contrasts(labels: &[String]) -> Result<Vec<Contrast>> {
    labels.iter().map(|s| s.parse()).collect()
}

impl RunConfig {
    /// Defaults, then the optional config document, then `key=value`
    /// overrides in order. Values are read as JSON, falling back to a string.
    pub fn build(document: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut root = serde_json::to_value(RunConfig::default())?;
        if let Some(text) = document {
            let doc: Value = serde_json::from_str(text)
                .map_err(|e| Error::Config(format!("config document: {e}")))?;
            merge(&mut root, doc);
        }
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut root, key, value)?;
        }
        let config: RunConfig =
            serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        parse_contrasts(&self.estimate.contrasts)?;
        parse_contrasts(&self.power.contrasts)?;
        Ok(())
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("'{key}' does not name a config field")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    Ok(())
}
