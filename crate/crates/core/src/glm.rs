//! Generalized linear models fitted by iteratively reweighted least squares.
//!
//! Logistic (fractional responses in `[0, 1]` allowed), Poisson and negative
//! binomial families with observation weights and offsets. The caller owns
//! the design matrix, including any intercept column.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Logistic,
    Poisson,
    NegativeBinomial,
    /// Single mean parameter on the log scale; design columns are ignored.
    InterceptOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlmSpec {
    pub family: Family,
    pub max_iterations: usize,
    /// Convergence threshold on the max-abs coefficient change.
    pub tolerance: f64,
}

impl GlmSpec {
    pub fn new(family: Family) -> Self {
        GlmSpec {
            family,
            max_iterations: 100,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub coefficients: Vec<f64>,
    /// Negative binomial size parameter.
    pub theta: Option<f64>,
    pub converged: bool,
    pub deviance: f64,
    pub iterations: usize,
    /// The weighted normal equations needed a ridge jitter to be solvable.
    pub ridge_used: bool,
}

const LOG_THETA_RANGE: (f64, f64) = (-5.0, 10.0);
const THETA_TOLERANCE: f64 = 1e-6;
const MAX_ETA: f64 = 700.0;
const MU_EPS: f64 = 1e-15;

fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy)]
enum Kernel {
    Logistic,
    Poisson,
    NegBin(f64),
}

impl Kernel {
    fn mean(self, eta: f64) -> f64 {
        match self {
            Kernel::Logistic => expit(eta),
            Kernel::Poisson | Kernel::NegBin(_) => eta.min(MAX_ETA).exp(),
        }
    }

    /// IRLS working weight (before the observation weight).
    fn working_weight(self, mu: f64) -> f64 {
        match self {
            Kernel::Logistic => (mu * (1.0 - mu)).max(MU_EPS),
            Kernel::Poisson => mu.max(MU_EPS),
            Kernel::NegBin(theta) => (mu / (1.0 + mu / theta)).max(MU_EPS),
        }
    }

    /// d mu / d eta.
    fn mu_eta(self, mu: f64) -> f64 {
        match self {
            Kernel::Logistic => (mu * (1.0 - mu)).max(MU_EPS),
            Kernel::Poisson | Kernel::NegBin(_) => mu.max(MU_EPS),
        }
    }

    /// Log-likelihood of one observation, dropping terms free of the mean.
    fn loglik(self, y: f64, mu: f64) -> f64 {
        match self {
            Kernel::Logistic => {
                let mu = mu.clamp(MU_EPS, 1.0 - MU_EPS);
                y * mu.ln() + (1.0 - y) * (1.0 - mu).ln()
            }
            Kernel::Poisson => {
                let mu = mu.max(MU_EPS);
                y * mu.ln() - mu
            }
            Kernel::NegBin(theta) => {
                let mu = mu.max(MU_EPS);
                y * (mu / (mu + theta)).ln() + theta * (theta / (mu + theta)).ln()
            }
        }
    }

    fn initial_mean(self, y: f64) -> f64 {
        match self {
            Kernel::Logistic => (y + 0.5) / 2.0,
            Kernel::Poisson | Kernel::NegBin(_) => y + 0.1,
        }
    }
}

fn check_inputs(
    spec: &GlmSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    offset: Option<&[f64]>,
) -> Result<()> {
    let n = y.len();
    if spec.tolerance <= 0.0 || spec.max_iterations == 0 {
        return Err(Error::Input("tolerance must be > 0 and max_iterations >= 1".into()));
    }
    if spec.family != Family::InterceptOnly && x.nrows() != n {
        return Err(Error::Dimension(format!("design has {} rows, response {}", x.nrows(), n)));
    }
    if weights.is_some_and(|w| w.len() != n) || offset.is_some_and(|o| o.len() != n) {
        return Err(Error::Dimension("weights/offset length must match the response".into()));
    }
    if weights.is_some_and(|w| w.iter().any(|&v| !(v >= 0.0) || !v.is_finite())) {
        return Err(Error::Input("weights must be finite and nonnegative".into()));
    }
    if offset.is_some_and(|o| o.iter().any(|v| !v.is_finite())) {
        return Err(Error::Input("offset must be finite".into()));
    }
    let bad = match spec.family {
        Family::Logistic => y.iter().any(|&v| !(0.0..=1.0).contains(&v)),
        _ => y.iter().any(|&v| !(v >= 0.0) || !v.is_finite()),
    };
    if bad {
        return Err(Error::Input(format!("response out of range for {:?}", spec.family)));
    }
    Ok(())
}

/// Fit a GLM by maximum (weighted) likelihood.
pub fn fit_glm(
    spec: &GlmSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    offset: Option<&[f64]>,
) -> Result<GlmFit> {
    check_inputs(spec, x, y, weights, offset)?;
    match spec.family {
        Family::InterceptOnly => Ok(fit_intercept_only(y, weights, offset)),
        Family::Logistic => Ok(irls(spec, Kernel::Logistic, x, y, weights, offset, None)),
        Family::Poisson => Ok(irls(spec, Kernel::Poisson, x, y, weights, offset, None)),
        Family::NegativeBinomial => Ok(fit_negative_binomial(spec, x, y, weights, offset)),
    }
}

fn fit_intercept_only(y: &[f64], weights: Option<&[f64]>, offset: Option<&[f64]>) -> GlmFit {
    // MLE of log E[y] = b + offset: exp(b) = sum(w y) / sum(w exp(offset)).
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let o = |i: usize| offset.map_or(0.0, |o| o[i]);
    let num: f64 = (0..y.len()).map(|i| w(i) * y[i]).sum();
    let den: f64 = (0..y.len()).map(|i| w(i) * o(i).exp()).sum();
    let coef = if den > 0.0 { (num.max(f64::MIN_POSITIVE) / den).ln() } else { 0.0 };
    let deviance = -2.0
        * (0..y.len())
            .map(|i| w(i) * Kernel::Poisson.loglik(y[i], (coef + o(i)).exp()))
            .sum::<f64>();
    GlmFit {
        coefficients: vec![coef],
        theta: None,
        converged: true,
        deviance,
        iterations: 0,
        ridge_used: false,
    }
}

/// Solve the symmetric positive semi-definite system, adding a ridge jitter
/// when the Cholesky factorization fails.
fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    if let Some(ch) = a.clone().cholesky() {
        return (ch.solve(b), false);
    }
    let p = a.nrows();
    let mut jitter = 1e-8;
    loop {
        let mut aj = a.clone();
        for j in 0..p {
            aj[(j, j)] += jitter;
        }
        if let Some(ch) = aj.cholesky() {
            return (ch.solve(b), true);
        }
        jitter *= 10.0;
        if jitter > 1e6 {
            return (DVector::zeros(p), true);
        }
    }
}

fn linear_predictor(x: &DMatrix<f64>, beta: &DVector<f64>, offset: Option<&[f64]>) -> Vec<f64> {
    let eta = x * beta;
    eta.iter()
        .enumerate()
        .map(|(i, &e)| e + offset.map_or(0.0, |o| o[i]))
        .collect()
}

fn total_loglik(kernel: Kernel, y: &[f64], eta: &[f64], weights: Option<&[f64]>) -> f64 {
    y.iter()
        .zip(eta)
        .enumerate()
        .map(|(i, (&yi, &e))| weights.map_or(1.0, |w| w[i]) * kernel.loglik(yi, kernel.mean(e)))
        .sum()
}

fn irls(
    spec: &GlmSpec,
    kernel: Kernel,
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    offset: Option<&[f64]>,
    start: Option<&[f64]>,
) -> GlmFit {
    let (n, p) = (x.nrows(), x.ncols());
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let o = |i: usize| offset.map_or(0.0, |o| o[i]);

    // Working response and weights either from a start vector or from the
    // data-based initial means.
    let mut beta: Option<DVector<f64>> = start.map(DVector::from_column_slice);
    let mut eta: Vec<f64> = match &beta {
        Some(b) => linear_predictor(x, b, offset),
        None => (0..n)
            .map(|i| {
                let mu = kernel.initial_mean(y[i]);
                match kernel {
                    Kernel::Logistic => (mu / (1.0 - mu)).ln(),
                    _ => mu.ln(),
                }
            })
            .collect(),
    };
    let mut loglik = if beta.is_some() {
        total_loglik(kernel, y, &eta, weights)
    } else {
        f64::NEG_INFINITY
    };
    let mut ridge_used = false;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < spec.max_iterations {
        iterations += 1;
        let mut xtwx = DMatrix::<f64>::zeros(p, p);
        let mut xtwz = DVector::<f64>::zeros(p);
        for i in 0..n {
            let wi = w(i);
            if wi == 0.0 {
                continue;
            }
            let mu = kernel.mean(eta[i]);
            let ww = wi * kernel.working_weight(mu);
            let z = eta[i] - o(i) + (y[i] - mu) / kernel.mu_eta(mu);
            let row = x.row(i);
            for a in 0..p {
                let xa = row[a] * ww;
                if xa == 0.0 {
                    continue;
                }
                xtwz[a] += xa * z;
                for b in a..p {
                    xtwx[(a, b)] += xa * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let (mut candidate, ridged) = solve_spd(xtwx, &xtwz);
        ridge_used |= ridged;

        let mut new_eta = linear_predictor(x, &candidate, offset);
        let mut new_loglik = total_loglik(kernel, y, &new_eta, weights);
        if let Some(prev) = &beta {
            let mut halvings = 0;
            while !(new_loglik >= loglik - 1e-12 * loglik.abs().max(1.0)) && halvings < 30 {
                candidate = (&candidate + prev) * 0.5;
                new_eta = linear_predictor(x, &candidate, offset);
                new_loglik = total_loglik(kernel, y, &new_eta, weights);
                halvings += 1;
            }
        }
        let change = match &beta {
            Some(prev) => (&candidate - prev).amax(),
            None => f64::INFINITY,
        };
        beta = Some(candidate);
        eta = new_eta;
        loglik = new_loglik;
        if change <= spec.tolerance {
            converged = true;
            break;
        }
    }

    let beta = beta.unwrap_or_else(|| DVector::zeros(p));
    let finite = beta.iter().all(|b| b.is_finite());
    GlmFit {
        coefficients: beta.iter().copied().collect(),
        theta: match kernel {
            Kernel::NegBin(t) => Some(t),
            _ => None,
        },
        converged: converged && finite,
        deviance: -2.0 * loglik,
        iterations,
        ridge_used,
    }
}

fn negbin_profile_loglik(theta: f64, y: &[f64], mu: &[f64], weights: Option<&[f64]>) -> f64 {
    use libm::lgamma;
    y.iter()
        .zip(mu)
        .enumerate()
        .map(|(i, (&yi, &m))| {
            let m = m.max(MU_EPS);
            let w = weights.map_or(1.0, |w| w[i]);
            w * (lgamma(yi + theta) - lgamma(theta) - lgamma(yi + 1.0)
                + theta * (theta / (theta + m)).ln()
                + yi * (m / (theta + m)).ln())
        })
        .sum()
}

fn fit_negative_binomial(
    spec: &GlmSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    offset: Option<&[f64]>,
) -> GlmFit {
    let poisson = irls(spec, Kernel::Poisson, x, y, weights, offset, None);
    let start = poisson.coefficients.clone();

    let evaluate = |log_theta: f64| -> (f64, GlmFit) {
        let theta = log_theta.exp();
        let fit = irls(spec, Kernel::NegBin(theta), x, y, weights, offset, Some(&start));
        let beta = DVector::from_column_slice(&fit.coefficients);
        let mu: Vec<f64> = linear_predictor(x, &beta, offset)
            .into_iter()
            .map(|e| e.min(MAX_ETA).exp())
            .collect();
        (negbin_profile_loglik(theta, y, &mu, weights), fit)
    };

    // Golden-section search maximizing the profile likelihood over log(theta).
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = LOG_THETA_RANGE;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = evaluate(c).0;
    let mut fd = evaluate(d).0;
    while hi - lo > THETA_TOLERANCE {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = evaluate(c).0;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = evaluate(d).0;
        }
    }
    let (ll, mut fit) = evaluate(0.5 * (lo + hi));
    fit.deviance = -2.0 * ll;
    fit.ridge_used |= poisson.ridge_used;
    fit
}

/// Fitted means `inverse_link(X b + offset)`.
pub fn predict_glm(
    fit: &GlmFit,
    spec: &GlmSpec,
    x: &DMatrix<f64>,
    offset: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let n = x.nrows();
    if offset.is_some_and(|o| o.len() != n) {
        return Err(Error::Dimension("offset length must match the design rows".into()));
    }
    let o = |i: usize| offset.map_or(0.0, |o| o[i]);
    if spec.family == Family::InterceptOnly {
        return Ok((0..n).map(|i| (fit.coefficients[0] + o(i)).min(MAX_ETA).exp()).collect());
    }
    if x.ncols() != fit.coefficients.len() {
        return Err(Error::Dimension(format!(
            "design has {} columns, fit has {} coefficients",
            x.ncols(),
            fit.coefficients.len()
        )));
    }
    let beta = DVector::from_column_slice(&fit.coefficients);
    let eta = linear_predictor(x, &beta, offset);
    let kernel = match spec.family {
        Family::Logistic => Kernel::Logistic,
        _ => Kernel::Poisson,
    };
    Ok(eta.into_iter().map(|e| kernel.mean(e)).collect())
}

/// Weighted score `Xᵀ(w ⊙ (y − μ))`, zero at the MLE for canonical links.
pub fn score(x: &DMatrix<f64>, y: &[f64], mu: &[f64], weights: Option<&[f64]>) -> Vec<f64> {
    (0..x.ncols())
        .map(|j| {
            (0..x.nrows())
                .map(|i| weights.map_or(1.0, |w| w[i]) * x[(i, j)] * (y[i] - mu[i]))
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    fn ones(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, 1.0)
    }

    #[test]
    fn logistic_intercept_only_mean_half() {
        let y = [0.0, 1.0, 1.0, 0.0];
        let fit = fit_glm(&GlmSpec::new(Family::Logistic), &ones(4), &y, None, None).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.coefficients[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn poisson_intercept_is_log_mean() {
        let y = [1.0, 2.0, 3.0];
        let fit = fit_glm(&GlmSpec::new(Family::Poisson), &ones(3), &y, None, None).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 2f64.ln(), epsilon = 1e-12);
        let io = fit_glm(&GlmSpec::new(Family::InterceptOnly), &ones(3), &y, None, None).unwrap();
        assert_abs_diff_eq!(io.coefficients[0], 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn predictions_from_fixed_coefficients() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.3, 1.0, -2.0, 1.0, 5.0]);
        let zero = GlmFit {
            coefficients: vec![0.0, 0.0],
            theta: None,
            converged: true,
            deviance: 0.0,
            iterations: 0,
            ridge_used: false,
        };
        let p = predict_glm(&zero, &GlmSpec::new(Family::Logistic), &x, None).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
        let two = GlmFit {
            coefficients: vec![2f64.ln()],
            ..zero.clone()
        };
        let p = predict_glm(&two, &GlmSpec::new(Family::Poisson), &ones(3), None).unwrap();
        p.iter().for_each(|&v| assert_abs_diff_eq!(v, 2.0, epsilon = 1e-14));
        assert!(predict_glm(&zero, &GlmSpec::new(Family::Poisson), &ones(3), None).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = GlmSpec::new(Family::Logistic);
        assert!(fit_glm(&spec, &ones(2), &[0.0, 1.5], None, None).is_err());
        assert!(fit_glm(&spec, &ones(3), &[0.0, 1.0], None, None).is_err());
        let spec = GlmSpec::new(Family::Poisson);
        assert!(fit_glm(&spec, &ones(2), &[-1.0, 1.0], None, None).is_err());
        assert!(fit_glm(&spec, &ones(2), &[1.0, 1.0], Some(&[1.0, -1.0]), None).is_err());
    }

    #[test]
    fn separation_reports_non_convergence() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0]);
        let y = [0.0, 0.0, 1.0, 1.0];
        let fit = fit_glm(&GlmSpec::new(Family::Logistic), &x, &y, None, None).unwrap();
        assert!(!fit.converged);
        assert!(fit.coefficients.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn collinear_columns_use_ridge() {
        let x = DMatrix::from_row_slice(4, 3, &[
            1.0, 1.0, 0.0, 1.0, 2.0, 0.0, 1.0, 3.0, 0.0, 1.0, 4.0, 0.0,
        ]);
        let y = [1.0, 2.0, 2.0, 5.0];
        let fit = fit_glm(&GlmSpec::new(Family::Poisson), &x, &y, None, None).unwrap();
        assert!(fit.ridge_used);
        assert_abs_diff_eq!(fit.coefficients[2], 0.0, epsilon = 1e-6);
    }

    fn simulated_poisson(n: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(n, 3);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b = f64::from(rng.random_bool(0.4));
            x[(i, 0)] = 1.0;
            x[(i, 1)] = a;
            x[(i, 2)] = b;
            let mu = (0.3 + 0.5 * a - 0.4 * b).exp();
            y.push(Poisson::new(mu).unwrap().sample(&mut rng));
        }
        (x, y)
    }

    #[test]
    fn canonical_score_vanishes() {
        let (x, y) = simulated_poisson(500, 3);
        let spec = GlmSpec::new(Family::Poisson);
        let fit = fit_glm(&spec, &x, &y, None, None).unwrap();
        let mu = predict_glm(&fit, &spec, &x, None).unwrap();
        assert!(score(&x, &y, &mu, None).iter().all(|s| s.abs() < 1e-6));

        let yb: Vec<f64> = y.iter().map(|&v| f64::from(v > 1.0)).collect();
        let spec = GlmSpec::new(Family::Logistic);
        let w: Vec<f64> = (0..500).map(|i| 0.5 + (i % 3) as f64).collect();
        let fit = fit_glm(&spec, &x, &yb, Some(&w), None).unwrap();
        let mu = predict_glm(&fit, &spec, &x, None).unwrap();
        assert!(score(&x, &yb, &mu, Some(&w)).iter().all(|s| s.abs() < 1e-6));
    }

    #[test]
    fn offset_absorbs_true_coefficients() {
        let (x, y) = simulated_poisson(10_000, 11);
        let b = DVector::from_column_slice(&[0.3, 0.5, -0.4]);
        let offset: Vec<f64> = (&x * &b).iter().copied().collect();
        let fit = fit_glm(&GlmSpec::new(Family::Poisson), &x, &y, None, Some(&offset)).unwrap();
        assert!(fit.coefficients.iter().all(|c| c.abs() < 0.05), "{:?}", fit.coefficients);
    }

    #[test]
    fn row_permutation_invariance() {
        let (x, y) = simulated_poisson(200, 5);
        let w: Vec<f64> = (0..200).map(|i| 1.0 + (i % 4) as f64 * 0.25).collect();
        let o: Vec<f64> = (0..200).map(|i| (i % 5) as f64 * 0.1).collect();
        let spec = GlmSpec::new(Family::Poisson);
        let fit = fit_glm(&spec, &x, &y, Some(&w), Some(&o)).unwrap();
        let perm: Vec<usize> = (0..200).rev().collect();
        let xp = x.select_rows(&perm);
        let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let fit_p = fit_glm(&spec, &xp, &pick(&y), Some(&pick(&w)), Some(&pick(&o))).unwrap();
        for (a, b) in fit.coefficients.iter().zip(&fit_p.coefficients) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn negative_binomial_recovers_overdispersion() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 4000;
        let theta = 2.0;
        let mut x = DMatrix::zeros(n, 2);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let a: f64 = rng.random_range(-1.0..1.0);
            x[(i, 0)] = 1.0;
            x[(i, 1)] = a;
            let mu = (1.0 + 0.5 * a).exp();
            let lambda = rand_distr::Gamma::new(theta, mu / theta).unwrap().sample(&mut rng);
            y.push(Poisson::new(lambda).unwrap().sample(&mut rng));
        }
        let fit = fit_glm(&GlmSpec::new(Family::NegativeBinomial), &x, &y, None, None).unwrap();
        assert!(fit.converged);
        let t = fit.theta.unwrap();
        assert!((t - theta).abs() < 0.4, "theta {t}");
        assert!((fit.coefficients[1] - 0.5).abs() < 0.08);
    }
}
