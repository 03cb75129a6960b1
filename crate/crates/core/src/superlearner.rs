//! Cross-validated convex stacking over a small library of regressions.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{fit_glm, predict_glm, Family, GlmFit, GlmSpec};
use crate::hal::{fit_hal, hal_predict, HalConfig, HalFit};

/// Random fold labels in `0..k` with sizes differing by at most one.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || n < k {
        return Err(Error::Input(format!("cannot split {n} rows into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Candidate {
    /// GLM on the features plus an intercept column.
    Glm(GlmSpec),
    Hal(HalConfig),
    /// Weighted cell means over distinct feature vectors.
    Saturated,
}

impl Candidate {
    pub fn name(&self) -> String {
        match self {
            Candidate::Glm(spec) => match spec.family {
                Family::InterceptOnly => "intercept".into(),
                Family::Poisson => "poisson".into(),
                Family::NegativeBinomial => "negbin".into(),
                Family::Logistic => "logistic".into(),
            },
            Candidate::Hal(_) => "hal".into(),
            Candidate::Saturated => "saturated".into(),
        }
    }

    pub fn fit(&self, x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<FittedCandidate> {
        match self {
            Candidate::Glm(spec) => {
                let fit = fit_glm(spec, &with_intercept(x), y, weights, None)?;
                if fit.coefficients.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Estimation(format!("{} fit diverged", self.name())));
                }
                Ok(FittedCandidate::Glm { spec: *spec, fit, n_features: x.ncols() })
            }
            Candidate::Hal(config) => Ok(FittedCandidate::Hal(fit_hal(x, y, weights, config)?)),
            Candidate::Saturated => SaturatedFit::fit(x, y, weights).map(FittedCandidate::Saturated),
        }
    }
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturatedFit {
    cells: Vec<(Vec<f64>, f64)>,
    pooled: f64,
    n_features: usize,
}

fn cell_key(row: &[f64]) -> Vec<u64> {
    row.iter().map(|v| v.to_bits()).collect()
}

impl SaturatedFit {
    fn fit(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<Self> {
        if y.len() != x.nrows() {
            return Err(Error::Dimension("response length must match design rows".into()));
        }
        let mut sums: HashMap<Vec<u64>, (Vec<f64>, f64, f64)> = HashMap::new();
        let mut order = Vec::new();
        let (mut tw, mut twy) = (0.0, 0.0);
        for i in 0..x.nrows() {
            let w = weights.map_or(1.0, |w| w[i]);
            if w <= 0.0 {
                continue;
            }
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let key = cell_key(&row);
            let e = sums.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                (row, 0.0, 0.0)
            });
            e.1 += w;
            e.2 += w * y[i];
            tw += w;
            twy += w * y[i];
        }
        if tw <= 0.0 {
            return Err(Error::Input("saturated fit needs positive total weight".into()));
        }
        let cells = order
            .into_iter()
            .map(|k| {
                let (row, w, wy) = sums.remove(&k).unwrap();
                (row, wy / w)
            })
            .collect();
        Ok(SaturatedFit { cells, pooled: twy / tw, n_features: x.ncols() })
    }

    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let lookup: HashMap<Vec<u64>, f64> =
            self.cells.iter().map(|(r, m)| (cell_key(r), *m)).collect();
        (0..x.nrows())
            .map(|i| {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                *lookup.get(&cell_key(&row)).unwrap_or(&self.pooled)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FittedCandidate {
    Glm { spec: GlmSpec, fit: GlmFit, n_features: usize },
    Hal(HalFit),
    Saturated(SaturatedFit),
}

impl FittedCandidate {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let expected = match self {
            FittedCandidate::Glm { n_features, .. } => *n_features,
            FittedCandidate::Hal(f) => f.n_features,
            FittedCandidate::Saturated(f) => f.n_features,
        };
        if x.ncols() != expected {
            return Err(Error::Dimension(format!(
                "model expects {expected} features, got {}",
                x.ncols()
            )));
        }
        match self {
            FittedCandidate::Glm { spec, fit, .. } => predict_glm(fit, spec, &with_intercept(x), None),
            FittedCandidate::Hal(f) => hal_predict(f, x),
            FittedCandidate::Saturated(f) => Ok(f.predict(x)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlLibrary {
    pub candidates: Vec<Candidate>,
    pub folds: usize,
    pub seed: u64,
}

impl SlLibrary {
    /// Intercept-only, Poisson, negative binomial and HAL.
    pub fn standard(seed: u64) -> Self {
        SlLibrary {
            candidates: vec![
                Candidate::Glm(GlmSpec::new(Family::InterceptOnly)),
                Candidate::Glm(GlmSpec::new(Family::Poisson)),
                Candidate::Glm(GlmSpec::new(Family::NegativeBinomial)),
                Candidate::Hal(HalConfig { seed, ..HalConfig::default() }),
            ],
            folds: 5,
            seed,
        }
    }

    pub fn single(candidate: Candidate, seed: u64) -> Self {
        SlLibrary { candidates: vec![candidate], folds: 5, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlFit {
    pub names: Vec<String>,
    pub weights: Vec<f64>,
    /// `None` for candidates that failed on the full data.
    pub fits: Vec<Option<FittedCandidate>>,
    pub cv_risk: Vec<f64>,
    pub ensemble_cv_risk: f64,
    /// Candidates excluded because a fold or the full-data fit failed.
    pub failed: Vec<bool>,
}

const EG_MAX_ITER: usize = 10_000;
const EG_GAP_TOL: f64 = 1e-8;

fn weighted_mse(z: &[Vec<f64>], y: &[f64], w: &[f64], alpha: &[f64]) -> f64 {
    let tw: f64 = w.iter().sum();
    (0..y.len())
        .map(|i| {
            let f: f64 = z.iter().zip(alpha).map(|(c, a)| a * c[i]).sum();
            w[i] * (y[i] - f).powi(2)
        })
        .sum::<f64>()
        / tw
}

fn mse_gradient(z: &[Vec<f64>], y: &[f64], w: &[f64], alpha: &[f64]) -> Vec<f64> {
    let tw: f64 = w.iter().sum();
    let resid: Vec<f64> = (0..y.len())
        .map(|i| y[i] - z.iter().zip(alpha).map(|(c, a)| a * c[i]).sum::<f64>())
        .collect();
    z.iter()
        .map(|c| -2.0 * (0..y.len()).map(|i| w[i] * c[i] * resid[i]).sum::<f64>() / tw)
        .collect()
}

/// Minimize weighted MSE of `Z alpha` over the simplex restricted to
/// `usable` columns by exponentiated gradient with backtracking.
pub fn simplex_least_squares(z: &[Vec<f64>], y: &[f64], w: &[f64], usable: &[bool]) -> Vec<f64> {
    let m = z.len();
    let k = usable.iter().filter(|&&u| u).count();
    let mut alpha: Vec<f64> = usable.iter().map(|&u| if u { 1.0 / k as f64 } else { 0.0 }).collect();
    if k <= 1 {
        return alpha;
    }
    let mut f = weighted_mse(z, y, w, &alpha);
    let mut eta = 1.0;
    for _ in 0..EG_MAX_ITER {
        let g = mse_gradient(z, y, w, &alpha);
        let gmin = (0..m).filter(|&j| usable[j]).map(|j| g[j]).fold(f64::INFINITY, f64::min);
        // Frank-Wolfe duality gap bounds the suboptimality.
        let gap: f64 = (0..m).map(|j| alpha[j] * (g[j] - gmin)).sum();
        if gap <= EG_GAP_TOL {
            break;
        }
        let gscale = (0..m).filter(|&j| usable[j]).map(|j| (g[j] - gmin).abs()).fold(0.0, f64::max);
        let mut accepted = false;
        for _ in 0..60 {
            let step = eta / gscale.max(f64::MIN_POSITIVE);
            let mut next: Vec<f64> = (0..m)
                .map(|j| if usable[j] { alpha[j] * (-(g[j] - gmin) * step).exp() } else { 0.0 })
                .collect();
            let s: f64 = next.iter().sum();
            next.iter_mut().for_each(|a| *a /= s);
            let fn_ = weighted_mse(z, y, w, &next);
            if fn_ <= f {
                accepted = fn_ < f || next == alpha;
                alpha = next;
                f = fn_;
                eta *= 2.0;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    alpha
}

/// Cross-validated convex stacking with full-data refits of each candidate.
pub fn fit_superlearner(
    library: &SlLibrary,
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
) -> Result<SlFit> {
    let n = x.nrows();
    if library.candidates.is_empty() {
        return Err(Error::Input("super learner library is empty".into()));
    }
    if y.len() != n || weights.is_some_and(|w| w.len() != n) {
        return Err(Error::Dimension("response and weights must match design rows".into()));
    }
    let w: Vec<f64> = weights.map_or_else(|| vec![1.0; n], <[f64]>::to_vec);
    let folds = make_folds(n, library.folds, library.seed)?;
    let m = library.candidates.len();
    let mut z = vec![vec![0.0; n]; m];
    let mut failed = vec![false; m];

    for k in 0..library.folds {
        let train: Vec<usize> = (0..n).filter(|&i| folds[i] != k).collect();
        let test: Vec<usize> = (0..n).filter(|&i| folds[i] == k).collect();
        let xt = x.select_rows(&train);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let wt: Vec<f64> = train.iter().map(|&i| w[i]).collect();
        let xv = x.select_rows(&test);
        for (j, cand) in library.candidates.iter().enumerate() {
            if failed[j] {
                continue;
            }
            match cand.fit(&xt, &yt, Some(&wt)).and_then(|f| f.predict(&xv)) {
                Ok(pred) if pred.iter().all(|p| p.is_finite()) => {
                    for (&i, p) in test.iter().zip(pred) {
                        z[j][i] = p;
                    }
                }
                _ => failed[j] = true,
            }
        }
    }

    let mut fits = Vec::with_capacity(m);
    for (j, cand) in library.candidates.iter().enumerate() {
        let fit = if failed[j] { None } else { cand.fit(x, y, weights).ok() };
        let ok = fit
            .as_ref()
            .is_some_and(|f| f.predict(x).is_ok_and(|p| p.iter().all(|v| v.is_finite())));
        if !ok {
            failed[j] = true;
        }
        fits.push(if ok { fit } else { None });
    }
    if failed.iter().all(|&f| f) {
        return Err(Error::Estimation("every super learner candidate failed".into()));
    }

    let unit = |j: usize| -> Vec<f64> { (0..m).map(|i| f64::from(u8::from(i == j))).collect() };
    let cv_risk: Vec<f64> = (0..m)
        .map(|j| if failed[j] { f64::INFINITY } else { weighted_mse(&z, y, &w, &unit(j)) })
        .collect();
    let usable: Vec<bool> = failed.iter().map(|f| !f).collect();
    let mut alpha = simplex_least_squares(&z, y, &w, &usable);
    let mut ensemble = weighted_mse(&z, y, &w, &alpha);
    let best = (0..m)
        .filter(|&j| usable[j])
        .min_by(|&a, &b| cv_risk[a].total_cmp(&cv_risk[b]))
        .unwrap();
    if ensemble > cv_risk[best] {
        alpha = unit(best);
        ensemble = cv_risk[best];
    }

    Ok(SlFit {
        names: library.candidates.iter().map(Candidate::name).collect(),
        weights: alpha,
        fits,
        cv_risk,
        ensemble_cv_risk: ensemble,
        failed,
    })
}

/// Weighted combination of the full-data candidate fits, clipped at zero.
pub fn sl_predict(fit: &SlFit, x_new: &DMatrix<f64>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x_new.nrows()];
    for (f, &a) in fit.fits.iter().zip(&fit.weights) {
        if a == 0.0 {
            continue;
        }
        let f = f.as_ref().ok_or_else(|| Error::Estimation("weighted candidate has no fit".into()))?;
        for (o, p) in out.iter_mut().zip(f.predict(x_new)?) {
            *o += a * p;
        }
    }
    Ok(out.into_iter().map(|v| v.max(0.0)).collect())
}
