//! Highly adaptive LASSO with zero-order splines.
//!
//! Each basis function is an indicator `1(x_s >= k_s for all s in S)` for a
//! variable subset `S` and a knot `k` taken from an observed row. The
//! L1-penalized least-squares problem over the standardized basis is solved
//! by cyclic coordinate descent along a descending lambda grid, with the
//! penalty chosen by K-fold cross-validation.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::superlearner::make_folds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HalConfig {
    pub max_degree: usize,
    pub n_lambda: usize,
    /// The grid spans this many decades below lambda_max.
    pub lambda_decades: f64,
    pub folds: usize,
    pub max_basis: usize,
    pub tolerance: f64,
    pub max_passes: usize,
    pub seed: u64,
}

impl Default for HalConfig {
    fn default() -> Self {
        HalConfig {
            max_degree: 2,
            n_lambda: 50,
            lambda_decades: 4.0,
            folds: 5,
            max_basis: 2000,
            tolerance: 1e-7,
            max_passes: 1000,
            seed: 0x4a1,
        }
    }
}

impl HalConfig {
    fn validate(&self) -> Result<()> {
        if self.max_degree < 1 || self.folds < 2 || self.n_lambda < 2 || self.max_basis == 0 {
            return Err(Error::Input(
                "HAL needs degree >= 1, folds >= 2, grid size >= 2 and a positive basis cap".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisFunction {
    pub variables: Vec<usize>,
    pub knots: Vec<f64>,
}

impl BasisFunction {
    pub fn evaluate(&self, row: &[f64]) -> bool {
        self.variables
            .iter()
            .zip(&self.knots)
            .all(|(&v, &k)| row[v] >= k)
    }
}

/// Binary basis matrix stored column-wise as sorted lists of the rows where
/// the indicator is one.
#[derive(Debug, Clone)]
pub struct HalBasis {
    pub functions: Vec<BasisFunction>,
    pub columns: Vec<Vec<usize>>,
    pub n_rows: usize,
    /// Number of distinct non-constant columns before the cap was applied.
    pub untruncated: usize,
}

impl HalBasis {
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.len());
        for (j, col) in self.columns.iter().enumerate() {
            for &i in col {
                m[(i, j)] = 1.0;
            }
        }
        m
    }
}

fn subsets(p: usize, max_degree: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut frontier: Vec<Vec<usize>> = (0..p).map(|v| vec![v]).collect();
    for _ in 0..max_degree.min(p) {
        out.extend(frontier.iter().cloned());
        frontier = frontier
            .iter()
            .flat_map(|s| {
                let last = *s.last().unwrap();
                (last + 1..p).map(move |v| {
                    let mut t = s.clone();
                    t.push(v);
                    t
                })
            })
            .collect();
    }
    out
}

fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|i| x.row(i).iter().copied().collect())
        .collect()
}

/// Zero-order spline basis with duplicate and constant columns removed and
/// the column count capped (highest-variance columns kept).
pub fn hal_basis(x: &DMatrix<f64>, config: &HalConfig) -> HalBasis {
    let (n, p) = (x.nrows(), x.ncols());
    let rows = rows_of(x);
    let mut functions = Vec::new();
    let mut columns: Vec<Vec<usize>> = Vec::new();
    let mut seen: HashMap<Vec<usize>, ()> = HashMap::new();

    for subset in subsets(p, config.max_degree) {
        let mut knot_seen: HashMap<Vec<u64>, ()> = HashMap::new();
        for row in &rows {
            let knots: Vec<f64> = subset.iter().map(|&v| row[v]).collect();
            let key: Vec<u64> = knots.iter().map(|k| k.to_bits()).collect();
            if knot_seen.insert(key, ()).is_some() {
                continue;
            }
            let f = BasisFunction {
                variables: subset.clone(),
                knots,
            };
            let col: Vec<usize> = (0..n).filter(|&i| f.evaluate(&rows[i])).collect();
            if col.len() == n || col.is_empty() {
                continue;
            }
            if seen.insert(col.clone(), ()).is_some() {
                continue;
            }
            functions.push(f);
            columns.push(col);
        }
    }

    let untruncated = functions.len();
    if untruncated > config.max_basis {
        let mut order: Vec<usize> = (0..untruncated).collect();
        let var = |j: usize| {
            let m = columns[j].len() as f64 / n as f64;
            m * (1.0 - m)
        };
        order.sort_by(|&a, &b| var(b).total_cmp(&var(a)).then(a.cmp(&b)));
        order.truncate(config.max_basis);
        order.sort_unstable();
        functions = order.iter().map(|&j| functions[j].clone()).collect();
        columns = order.iter().map(|&j| std::mem::take(&mut columns[j])).collect();
    }
    HalBasis {
        functions,
        columns,
        n_rows: n,
        untruncated,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalFit {
    /// Basis functions with nonzero coefficients.
    pub basis: Vec<BasisFunction>,
    /// Coefficients on the raw (0/1) indicator scale.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
    pub cv_risk: Vec<f64>,
    pub n_features: usize,
    pub basis_size: usize,
    pub basis_truncated: bool,
}

/// Coordinate-descent LASSO on standardized binary columns restricted to a
/// subset of rows.
struct LassoProblem {
    /// Per column: local row indices where the indicator is one.
    cols: Vec<Vec<usize>>,
    w: Vec<f64>,
    y: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    mean: Vec<f64>,
    sd: Vec<f64>,
    /// First column identical to this one on the rows with positive weight.
    rep: Vec<usize>,
    copies: Vec<usize>,
}

impl LassoProblem {
    fn new(basis: &HalBasis, rows: &[usize], y: &[f64], weights: &[f64]) -> Self {
        let mut local = vec![usize::MAX; basis.n_rows];
        for (k, &i) in rows.iter().enumerate() {
            local[i] = k;
        }
        let total: f64 = rows.iter().map(|&i| weights[i]).sum();
        let w: Vec<f64> = rows.iter().map(|&i| weights[i] / total).collect();
        let yl: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let y_mean: f64 = rows.iter().map(|&i| weights[i] * y[i]).sum::<f64>() / total;
        let y_var: f64 = w.iter().zip(&yl).map(|(a, b)| a * (b - y_mean).powi(2)).sum();
        let cols: Vec<Vec<usize>> = basis
            .columns
            .iter()
            .map(|c| c.iter().filter_map(|&i| (local[i] != usize::MAX).then_some(local[i])).collect())
            .collect();
        let mean: Vec<f64> = cols.iter().map(|c| c.iter().map(|&i| w[i]).sum()).collect();
        let sd: Vec<f64> = mean
            .iter()
            .map(|&m: &f64| {
                let v = m * (1.0 - m);
                if v > 1e-12 { v.sqrt() } else { 0.0 }
            })
            .collect();
        // Columns that coincide on the fitting rows share one coordinate and
        // split its coefficient evenly, the minimum-norm optimum.
        let mut first: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut rep = Vec::with_capacity(cols.len());
        let mut copies = vec![0; cols.len()];
        for (j, c) in cols.iter().enumerate() {
            let key: Vec<usize> = c.iter().copied().filter(|&i| w[i] > 0.0).collect();
            let r = *first.entry(key).or_insert(j);
            rep.push(r);
            copies[r] += 1;
        }
        LassoProblem {
            cols,
            w,
            y: yl,
            y_mean,
            y_scale: y_var.sqrt(),
            mean,
            sd,
            rep,
            copies,
        }
    }

    fn lambda_max(&self) -> f64 {
        let r: Vec<f64> = self.y.iter().map(|v| v - self.y_mean).collect();
        (0..self.cols.len())
            .filter(|&j| self.sd[j] > 0.0 && self.rep[j] == j)
            .map(|j| {
                let s: f64 = self.cols[j].iter().map(|&i| self.w[i] * r[i]).sum();
                (s / self.sd[j]).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Solve along `lambdas` (descending) with warm starts, returning the
    /// standardized coefficients at each value.
    fn path(&self, lambdas: &[f64], tol: f64, max_passes: usize) -> Vec<Vec<f64>> {
        let p = self.cols.len();
        let mut beta = vec![0.0; p];
        // Residual r_i = rhat_i + shift.
        let mut rhat: Vec<f64> = self.y.iter().map(|v| v - self.y_mean).collect();
        let mut shift = 0.0;
        let threshold = tol * self.y_scale.max(f64::MIN_POSITIVE);
        let mut out = Vec::with_capacity(lambdas.len());

        let update = |j: usize, lambda: f64, beta: &mut [f64], rhat: &mut [f64], shift: &mut f64| -> f64 {
            let sd = self.sd[j];
            if sd == 0.0 || self.rep[j] != j {
                return 0.0;
            }
            let m = self.mean[j];
            let s: f64 = self.cols[j].iter().map(|&i| self.w[i] * rhat[i]).sum::<f64>() + *shift * m;
            // Sum of w*r over all rows is zero (centered columns, centered y).
            let grad = s / sd;
            let rho = grad + beta[j];
            let new = soft_threshold(rho, lambda);
            let delta = new - beta[j];
            if delta != 0.0 {
                beta[j] = new;
                *shift += delta * m / sd;
                let step = delta / sd;
                for &i in &self.cols[j] {
                    rhat[i] -= step;
                }
            }
            delta.abs()
        };

        for &lambda in lambdas {
            // `max_passes` bounds the full sweeps; each active-set phase
            // gets its own budget of the same size.
            let mut passes = 0;
            loop {
                let mut max_delta = 0.0f64;
                for j in 0..p {
                    max_delta = max_delta.max(update(j, lambda, &mut beta, &mut rhat, &mut shift));
                }
                passes += 1;
                if max_delta <= threshold || passes >= max_passes {
                    break;
                }
                for sweep in 1..=max_passes {
                    let mut max_delta = 0.0f64;
                    for j in 0..p {
                        if beta[j] != 0.0 {
                            max_delta =
                                max_delta.max(update(j, lambda, &mut beta, &mut rhat, &mut shift));
                        }
                    }
                    if max_delta <= threshold {
                        break;
                    }
                    if sweep % POLISH_EVERY == 0 && self.polish(lambda, &mut beta, &mut rhat, &mut shift) {
                        break;
                    }
                }
            }
            out.push(beta.clone());
        }
        out
    }

    /// Active-set step: minimize on the nonzero coordinates with their signs
    /// held, walking toward that minimizer and dropping any coordinate that
    /// reaches zero first. Each step lowers the objective; the next full
    /// sweep picks up coordinates that should enter.
    fn polish(&self, lambda: f64, beta: &mut [f64], rhat: &mut [f64], shift: &mut f64) -> bool {
        let n = self.w.len();
        let yc = DVector::from_iterator(n, self.y.iter().map(|v| v - self.y_mean));
        let start: Vec<usize> = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect();
        if start.is_empty() {
            return false;
        }
        let mut z = DMatrix::zeros(n, start.len());
        for (a, &j) in start.iter().enumerate() {
            let (m, sd) = (self.mean[j], self.sd[j]);
            z.column_mut(a).fill(-m / sd);
            for &i in &self.cols[j] {
                z[(i, a)] = (1.0 - m) / sd;
            }
        }
        let wz = DMatrix::from_fn(n, start.len(), |i, a| self.w[i] * z[(i, a)]);
        let full_gram = wz.transpose() * &z;
        let full_c = wz.transpose() * &yc;
        // Positions in `start` still active.
        let mut live: Vec<usize> = (0..start.len()).collect();
        let mut moved = false;
        while !live.is_empty() {
            let gram = full_gram.select_rows(&live).select_columns(&live);
            let signs = DVector::from_iterator(live.len(), live.iter().map(|&a| beta[start[a]].signum()));
            let current = DVector::from_iterator(live.len(), live.iter().map(|&a| beta[start[a]]));
            let mut rhs = DVector::from_iterator(live.len(), live.iter().map(|&a| full_c[a]));
            rhs -= &signs * lambda;
            let k = live.len();
            let factor = PivotedCholesky::new(&gram);
            let basis = &factor.order;
            let mut in_basis = vec![false; k];
            for &r in basis {
                in_basis[r] = true;
            }
            let pick = |v: &DVector<f64>| -> Vec<f64> { basis.iter().map(|&r| v[r]).collect() };
            let u = factor.solve(&pick(&signs));
            // A dependent column q gives the null vector e_q - G_BB^-1 G_Bq;
            // along it the fit is unchanged while the penalty moves.
            let column = |q: usize| -> Vec<f64> { basis.iter().map(|&r| gram[(r, q)]).collect() };
            let mut best: Option<(usize, f64)> = None;
            for q in (0..k).filter(|&q| !in_basis[q]) {
                let slope = signs[q] - u.iter().zip(column(q)).map(|(a, b)| a * b).sum::<f64>();
                if slope.abs() > 1e-9 && best.is_none_or(|(_, b)| slope.abs() > b.abs()) {
                    best = Some((q, slope));
                }
            }
            let (direction, full_step) = match best {
                Some((q, slope)) => {
                    let v = factor.solve(&column(q));
                    let mut d = DVector::zeros(k);
                    d[q] = 1.0;
                    for (i, &r) in basis.iter().enumerate() {
                        d[r] = -v[i];
                    }
                    (d * -slope.signum(), false)
                }
                None => {
                    let x = factor.solve(&pick(&rhs));
                    let mut target = DVector::zeros(k);
                    for (i, &r) in basis.iter().enumerate() {
                        target[r] = x[i];
                    }
                    (target - &current, true)
                }
            };
            if !direction.iter().all(|v| v.is_finite()) {
                break;
            }
            // First zero crossing along the direction.
            let mut t = if full_step { 1.0 } else { f64::INFINITY };
            let mut hit = None;
            for r in 0..live.len() {
                if current[r] * direction[r] < 0.0 {
                    let s = -current[r] / direction[r];
                    if s < t {
                        t = s;
                        hit = Some(r);
                    }
                }
            }
            if !t.is_finite() {
                break;
            }
            for (r, &a) in live.iter().enumerate() {
                beta[start[a]] = current[r] + t * direction[r];
            }
            moved = true;
            match hit {
                Some(r) => {
                    beta[start[live[r]]] = 0.0;
                    live.remove(r);
                }
                None => break,
            }
        }
        if moved {
            *shift = (0..beta.len())
                .filter(|&j| beta[j] != 0.0)
                .map(|j| beta[j] * self.mean[j] / self.sd[j])
                .sum();
            rhat.copy_from_slice(yc.as_slice());
            for j in (0..beta.len()).filter(|&j| beta[j] != 0.0) {
                let step = beta[j] / self.sd[j];
                for &i in &self.cols[j] {
                    rhat[i] -= step;
                }
            }
        }
        moved
    }

    /// Raw-scale intercept and coefficients from standardized ones.
    fn unstandardize(&self, beta: &[f64]) -> (f64, Vec<f64>) {
        let mut intercept = self.y_mean;
        let coef: Vec<f64> = (0..beta.len())
            .map(|j| {
                let r = self.rep[j];
                let b = beta[r] / self.copies[r] as f64;
                if b == 0.0 || self.sd[j] == 0.0 {
                    0.0
                } else {
                    intercept -= b * self.mean[j] / self.sd[j];
                    b / self.sd[j]
                }
            })
            .collect();
        (intercept, coef)
    }
}

/// Cholesky factor of a positive semidefinite matrix restricted to a maximal
/// well-conditioned set of its columns, chosen by diagonal pivoting.
struct PivotedCholesky {
    /// Selected indices in pivot order.
    order: Vec<usize>,
    /// Row `t` holds the factor entries for `order[t]`, diagonal last.
    rows: Vec<Vec<f64>>,
}

impl PivotedCholesky {
    fn new(g: &DMatrix<f64>) -> Self {
        let k = g.nrows();
        let top = (0..k).map(|i| g[(i, i)]).fold(0.0, f64::max);
        let mut diag: Vec<f64> = (0..k).map(|i| g[(i, i)]).collect();
        let mut partial: Vec<Vec<f64>> = vec![Vec::new(); k];
        let mut free = vec![true; k];
        let (mut order, mut rows) = (Vec::new(), Vec::new());
        while let Some(p) = (0..k).filter(|&i| free[i]).max_by(|&x, &y| diag[x].total_cmp(&diag[y])) {
            if !(diag[p] > RANK_TOL * top) {
                break;
            }
            free[p] = false;
            let d = diag[p].sqrt();
            let mut lp = std::mem::take(&mut partial[p]);
            for i in (0..k).filter(|&i| free[i]) {
                let dot: f64 = partial[i].iter().zip(&lp).map(|(a, b)| a * b).sum();
                let l = (g[(i, p)] - dot) / d;
                partial[i].push(l);
                diag[i] -= l * l;
            }
            lp.push(d);
            order.push(p);
            rows.push(lp);
        }
        PivotedCholesky { order, rows }
    }

    /// Solve on the selected block; `b` and the result follow `order`.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let r = self.order.len();
        let mut y = vec![0.0; r];
        for t in 0..r {
            let dot: f64 = self.rows[t][..t].iter().zip(&y).map(|(a, b)| a * b).sum();
            y[t] = (b[t] - dot) / self.rows[t][t];
        }
        for t in (0..r).rev() {
            let dot: f64 = (t + 1..r).map(|u| self.rows[u][t] * y[u]).sum();
            y[t] = (y[t] - dot) / self.rows[t][t];
        }
        y
    }
}

/// Active-set sweeps between attempts at an exact active-set solve.
const POLISH_EVERY: usize = 20;
/// Relative eigenvalue below which an active Gram matrix counts as singular.
const RANK_TOL: f64 = 1e-10;

fn soft_threshold(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

fn lambda_grid(lambda_max: f64, config: &HalConfig) -> Vec<f64> {
    let k = config.n_lambda;
    (0..k)
        .map(|i| lambda_max * 10f64.powf(-config.lambda_decades * i as f64 / (k - 1) as f64))
        .collect()
}

fn check_fit_inputs(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::Dimension(format!("design has {n} rows, response {}", y.len())));
    }
    if x.ncols() == 0 {
        return Err(Error::Input("HAL needs at least one covariate".into()));
    }
    let w = weights.map_or_else(|| vec![1.0; n], <[f64]>::to_vec);
    if w.len() != n || w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Input("weights must be nonnegative with a positive sum".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("response must be finite".into()));
    }
    Ok(w)
}

fn assemble(
    basis: &HalBasis,
    problem: &LassoProblem,
    beta: &[f64],
    lambda: f64,
    grid: Vec<f64>,
    cv_risk: Vec<f64>,
    n_features: usize,
) -> HalFit {
    let (intercept, coef) = problem.unstandardize(beta);
    let active: Vec<usize> = (0..coef.len()).filter(|&j| coef[j] != 0.0).collect();
    HalFit {
        basis: active.iter().map(|&j| basis.functions[j].clone()).collect(),
        coefficients: active.iter().map(|&j| coef[j]).collect(),
        intercept,
        lambda,
        lambda_grid: grid,
        cv_risk,
        n_features,
        basis_size: basis.len(),
        basis_truncated: basis.untruncated > basis.len(),
    }
}

/// Full-data LASSO path over the standard lambda grid (no cross-validation).
pub fn hal_path(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    config: &HalConfig,
) -> Result<Vec<HalFit>> {
    config.validate()?;
    let w = check_fit_inputs(x, y, weights)?;
    let basis = hal_basis(x, config);
    let all: Vec<usize> = (0..x.nrows()).collect();
    let problem = LassoProblem::new(&basis, &all, y, &w);
    let grid = lambda_grid(problem.lambda_max(), config);
    let path = problem.path(&grid, config.tolerance, config.max_passes);
    Ok(path
        .iter()
        .zip(&grid)
        .map(|(beta, &l)| assemble(&basis, &problem, beta, l, grid.clone(), Vec::new(), x.ncols()))
        .collect())
}

/// Fit HAL with the penalty selected by K-fold cross-validated weighted
/// squared error, then refit on all rows at the selected penalty.
pub fn fit_hal(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    config: &HalConfig,
) -> Result<HalFit> {
    config.validate()?;
    let w = check_fit_inputs(x, y, weights)?;
    let n = x.nrows();
    if n < config.folds {
        return Err(Error::Input(format!("HAL needs n >= folds ({n} < {})", config.folds)));
    }
    let basis = hal_basis(x, config);
    let all: Vec<usize> = (0..n).collect();
    let full = LassoProblem::new(&basis, &all, y, &w);
    let lambda_max = full.lambda_max();
    if full.y_scale <= 1e-12 * full.y_mean.abs().max(1.0) || lambda_max == 0.0 || basis.is_empty() {
        return Ok(HalFit {
            basis: Vec::new(),
            coefficients: Vec::new(),
            intercept: full.y_mean,
            lambda: 0.0,
            lambda_grid: vec![0.0],
            cv_risk: vec![0.0],
            n_features: x.ncols(),
            basis_size: basis.len(),
            basis_truncated: basis.untruncated > basis.len(),
        });
    }
    let grid = lambda_grid(lambda_max, config);

    let folds = make_folds(n, config.folds, config.seed)?;
    let mut sse = vec![0.0; grid.len()];
    let mut wsum = 0.0;
    for k in 0..config.folds {
        let train: Vec<usize> = (0..n).filter(|&i| folds[i] != k).collect();
        let test: Vec<usize> = (0..n).filter(|&i| folds[i] == k).collect();
        let problem = LassoProblem::new(&basis, &train, y, &w);
        let path = problem.path(&grid, config.tolerance, config.max_passes);
        let mut in_test = vec![usize::MAX; n];
        for (t, &i) in test.iter().enumerate() {
            in_test[i] = t;
        }
        for (g, beta) in path.iter().enumerate() {
            let (intercept, coef) = problem.unstandardize(beta);
            let mut pred = vec![intercept; test.len()];
            for (j, &c) in coef.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                for &i in &basis.columns[j] {
                    if in_test[i] != usize::MAX {
                        pred[in_test[i]] += c;
                    }
                }
            }
            sse[g] += test
                .iter()
                .zip(&pred)
                .map(|(&i, &f)| w[i] * (y[i] - f).powi(2))
                .sum::<f64>();
        }
        wsum += test.iter().map(|&i| w[i]).sum::<f64>();
    }
    let cv_risk: Vec<f64> = sse.iter().map(|s| s / wsum).collect();
    let best = (0..grid.len())
        .min_by(|&a, &b| cv_risk[a].total_cmp(&cv_risk[b]).then(a.cmp(&b)))
        .unwrap();

    let path = full.path(&grid[..=best], config.tolerance, config.max_passes);
    Ok(assemble(
        &basis,
        &full,
        path.last().unwrap(),
        grid[best],
        grid.clone(),
        cv_risk,
        x.ncols(),
    ))
}

/// Piecewise-constant predictions at new rows.
pub fn hal_predict(fit: &HalFit, x_new: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x_new.ncols() != fit.n_features {
        return Err(Error::Dimension(format!(
            "HAL fit on {} features, got {}",
            fit.n_features,
            x_new.ncols()
        )));
    }
    Ok(rows_of(x_new)
        .iter()
        .map(|row| {
            fit.intercept
                + fit
                    .basis
                    .iter()
                    .zip(&fit.coefficients)
                    .filter(|(f, _)| f.evaluate(row))
                    .map(|(_, c)| c)
                    .sum::<f64>()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn column(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn single_column_basis() {
        let b = hal_basis(&column(&[1.0, 2.0, 3.0]), &HalConfig::default());
        assert_eq!(b.len(), 2);
        assert_eq!(b.columns, vec![vec![1, 2], vec![2]]);
        assert_eq!(b.functions[0].knots, vec![2.0]);
    }

    #[test]
    fn constant_column_contributes_nothing() {
        let x = DMatrix::from_row_slice(3, 2, &[5.0, 1.0, 5.0, 2.0, 5.0, 3.0]);
        let b = hal_basis(&x, &HalConfig::default());
        assert_eq!(b.len(), 2);
        assert!(b.functions.iter().all(|f| f.variables == vec![1]));
    }

    #[test]
    fn two_binary_columns() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        let b = hal_basis(&x, &HalConfig::default());
        // 1(x1>=1), 1(x2>=1), 1(x1>=1, x2>=1)
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn cap_keeps_highest_variance() {
        let x = column(&(0..20).map(f64::from).collect::<Vec<_>>());
        let cfg = HalConfig {
            max_basis: 3,
            ..HalConfig::default()
        };
        let b = hal_basis(&x, &cfg);
        assert_eq!(b.len(), 3);
        assert_eq!(b.untruncated, 19);
        // Columns closest to a 50/50 split.
        let sizes: Vec<usize> = b.columns.iter().map(Vec::len).collect();
        assert!(sizes.iter().all(|&s| (9..=11).contains(&s)), "{sizes:?}");
    }

    #[test]
    fn constant_response_is_intercept_only() {
        let x = column(&(0..10).map(f64::from).collect::<Vec<_>>());
        let fit = fit_hal(&x, &[7.0; 10], None, &HalConfig::default()).unwrap();
        assert!(fit.basis.is_empty());
        assert_eq!(fit.intercept, 7.0);
        let p = hal_predict(&fit, &column(&[-3.0, 100.0])).unwrap();
        assert_eq!(p, vec![7.0, 7.0]);
    }

    #[test]
    fn lambda_max_zeroes_everything() {
        let x = column(&(0..30).map(f64::from).collect::<Vec<_>>());
        let y: Vec<f64> = (0..30).map(|i| f64::from(i >= 15) + 0.1 * f64::from(i % 3)).collect();
        let path = hal_path(&x, &y, None, &HalConfig::default()).unwrap();
        assert!(path[0].basis.is_empty());
        assert!(!path.last().unwrap().basis.is_empty());
    }

    #[test]
    fn prediction_is_right_continuous_step() {
        let xs: Vec<f64> = (0..40).map(f64::from).collect();
        let y: Vec<f64> = xs.iter().map(|&v| if v >= 20.0 { 3.0 } else { 1.0 }).collect();
        let fit = fit_hal(&column(&xs), &y, None, &HalConfig::default()).unwrap();
        let train = hal_predict(&fit, &column(&xs)).unwrap();
        let mids: Vec<f64> = xs.iter().map(|v| v + 0.5).collect();
        let mid = hal_predict(&fit, &column(&mids)).unwrap();
        for (a, b) in train.iter().zip(&mid) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let fit = fit_hal(&column(&[1.0, 2.0, 3.0, 4.0, 5.0]), &[1.0, 2.0, 1.0, 2.0, 3.0], None, &HalConfig::default()).unwrap();
        assert!(hal_predict(&fit, &DMatrix::zeros(2, 2)).is_err());
        assert!(fit_hal(&column(&[1.0, 2.0]), &[1.0, 2.0], None, &HalConfig::default()).is_err());
    }
}
