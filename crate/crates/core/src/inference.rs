//! Influence-function variance estimates and Wald contrasts between regimes.

use serde::{Deserialize, Serialize};

use crate::data::{follows_regime, TrialDataset};
use crate::error::{Error, Result};
use crate::regime::{Contrast, Regime};
use crate::tmle::TmleFit;

/// Below this the contrast standard deviation is treated as zero.
pub const DEGENERATE_TAU: f64 = 1e-12;

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile: Acklam's rational approximation followed by one
/// Halley step against the exact distribution function.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Input(format!("quantile level {p} must lie in (0, 1)")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383_577_518_672_69e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const LOW: f64 = 0.02425;
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - LOW {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    let e = normal_cdf(x) - p;
    let u = e / normal_pdf(x);
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// How the variance of one regime's estimator is formed from its influence
/// components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VarianceForm {
    /// Second moment of the summed influence function.
    #[default]
    SummedComponents,
    /// Sum over components of their second moments.
    ComponentSquares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceCurve {
    /// `D_0, D_1, D_2, D_3` per subject.
    pub components: [Vec<f64>; 4],
    /// `sum_t D_t` per subject.
    pub total: Vec<f64>,
}

pub fn influence_components(fit: &TmleFit) -> InfluenceCurve {
    let n = fit.n;
    let total = (0..n).map(|i| fit.components.iter().map(|d| d[i]).sum()).collect();
    InfluenceCurve { components: fit.components.clone(), total }
}

pub fn variance_estimate(ic: &InfluenceCurve) -> f64 {
    variance_estimate_with(ic, VarianceForm::SummedComponents)
}

pub fn variance_estimate_with(ic: &InfluenceCurve, form: VarianceForm) -> f64 {
    let n = ic.total.len() as f64;
    match form {
        VarianceForm::SummedComponents => ic.total.iter().map(|v| v * v).sum::<f64>() / n,
        VarianceForm::ComponentSquares => {
            ic.components.iter().flatten().map(|v| v * v).sum::<f64>() / n
        }
    }
}

pub fn covariance_estimate(ic1: &InfluenceCurve, ic2: &InfluenceCurve) -> Result<f64> {
    if ic1.total.len() != ic2.total.len() {
        return Err(Error::Dimension(format!(
            "influence curves over {} and {} subjects",
            ic1.total.len(),
            ic2.total.len()
        )));
    }
    let n = ic1.total.len() as f64;
    Ok(ic1.total.iter().zip(&ic2.total).map(|(a, b)| a * b).sum::<f64>() / n)
}

/// Standard error and confidence interval for one regime mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeInference {
    pub regime: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

pub fn regime_inference(fit: &TmleFit, alpha: f64, form: VarianceForm) -> Result<RegimeInference> {
    let z = normal_quantile(1.0 - alpha / 2.0)?;
    let se = (variance_estimate_with(&influence_components(fit), form) / fit.n as f64).sqrt();
    Ok(RegimeInference {
        regime: fit.regime.label.to_string(),
        estimate: fit.psi,
        se,
        ci_lower: fit.psi - z * se,
        ci_upper: fit.psi + z * se,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastResult {
    pub contrast: Contrast,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub reject: bool,
    pub alpha: f64,
}

pub fn contrast_test(fit1: &TmleFit, fit2: &TmleFit, alpha: f64) -> Result<ContrastResult> {
    contrast_test_with(fit1, fit2, alpha, VarianceForm::SummedComponents)
}

/// Wald test of `psi1 = psi2` with the delta-method variance
/// `tau^2 = s1^2 + s2^2 - 2 s12`; rejects when `|z|` strictly exceeds the
/// normal `1 - alpha/2` quantile.
pub fn contrast_test_with(
    fit1: &TmleFit,
    fit2: &TmleFit,
    alpha: f64,
    form: VarianceForm,
) -> Result<ContrastResult> {
    if fit1.data_fingerprint != fit2.data_fingerprint || fit1.n != fit2.n {
        return Err(Error::Input("contrasted fits come from different datasets".into()));
    }
    let crit = normal_quantile(1.0 - alpha / 2.0)?;
    let (ic1, ic2) = (influence_components(fit1), influence_components(fit2));
    let tau2 = variance_estimate_with(&ic1, form) + variance_estimate_with(&ic2, form)
        - 2.0 * covariance_estimate(&ic1, &ic2)?;
    let tau = tau2.max(0.0).sqrt();
    let n = fit1.n as f64;
    let estimate = fit1.psi - fit2.psi;
    let contrast = Contrast::new(fit1.regime.label, fit2.regime.label);
    let se = tau / n.sqrt();
    if tau <= DEGENERATE_TAU {
        if estimate.abs() <= DEGENERATE_TAU {
            return Ok(ContrastResult {
                contrast,
                estimate,
                se,
                z: 0.0,
                p_value: 1.0,
                ci_lower: estimate,
                ci_upper: estimate,
                reject: false,
                alpha,
            });
        }
        return Err(Error::DegenerateVariance(format!(
            "contrast {contrast} has zero estimated variance but a nonzero difference"
        )));
    }
    let z = estimate / se;
    Ok(ContrastResult {
        contrast,
        estimate,
        se,
        z,
        p_value: (2.0 * normal_cdf(-z.abs())).min(1.0),
        ci_lower: estimate - crit * se,
        ci_upper: estimate + crit * se,
        reject: z.abs() > crit,
        alpha,
    })
}

/// Unadjusted mean of `Y1 + Y2 + Y3` among complete cases that followed the
/// regime. A naive baseline for comparison only.
pub fn complete_case_mean(data: &TrialDataset, regime: &Regime) -> Result<f64> {
    let ys: Vec<f64> = data
        .records()
        .iter()
        .filter(|r| r.attended_through(3) && follows_regime(r, regime, 1))
        .filter_map(|r| r.total_outcome())
        .collect();
    if ys.is_empty() {
        return Err(Error::Estimation(format!("no complete cases follow regime {}", regime.label)));
    }
    Ok(ys.iter().sum::<f64>() / ys.len() as f64)
}

pub fn complete_case_difference(data: &TrialDataset, r1: &Regime, r2: &Regime) -> Result<f64> {
    Ok(complete_case_mean(data, r1)? - complete_case_mean(data, r2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn curve(total: Vec<f64>) -> InfluenceCurve {
        let n = total.len();
        InfluenceCurve {
            components: [total.clone(), vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            total,
        }
    }

    #[test]
    fn variance_examples() {
        assert_abs_diff_eq!(variance_estimate(&curve(vec![3.0; 5])), 9.0);
        assert_abs_diff_eq!(variance_estimate(&curve(vec![1.0, -1.0])), 1.0);
        let a = curve(vec![1.0, -1.0]);
        assert_eq!(covariance_estimate(&a, &a).unwrap(), variance_estimate(&a));
        assert_eq!(covariance_estimate(&a, &curve(vec![1.0, 1.0])).unwrap(), 0.0);
        assert!(covariance_estimate(&a, &curve(vec![1.0])).is_err());
    }

    #[test]
    fn component_squares_variant() {
        let ic = InfluenceCurve {
            components: [vec![1.0, 1.0], vec![1.0, -1.0], vec![0.0; 2], vec![0.0; 2]],
            total: vec![2.0, 0.0],
        };
        assert_abs_diff_eq!(variance_estimate_with(&ic, VarianceForm::SummedComponents), 2.0);
        assert_abs_diff_eq!(variance_estimate_with(&ic, VarianceForm::ComponentSquares), 2.0);
        let ic = InfluenceCurve {
            components: [vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0; 2], vec![0.0; 2]],
            total: vec![2.0, 2.0],
        };
        assert_abs_diff_eq!(variance_estimate_with(&ic, VarianceForm::SummedComponents), 4.0);
        assert_abs_diff_eq!(variance_estimate_with(&ic, VarianceForm::ComponentSquares), 2.0);
    }

    #[test]
    fn quantiles() {
        assert_abs_diff_eq!(normal_quantile(0.975).unwrap(), 1.959963984540054, epsilon = 1e-12);
        assert_abs_diff_eq!(normal_quantile(0.5).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(normal_quantile(1e-10).unwrap(), -6.361340902404056, epsilon = 1e-9);
        assert!(normal_quantile(1.0).is_err());
        assert_abs_diff_eq!(normal_cdf(1.959963984540054), 0.975, epsilon = 1e-15);
    }
}
