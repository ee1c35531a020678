//! L1-penalized weighted least squares by cyclic coordinate descent.
//!
//! The solver minimizes, on the internally standardized scale,
//!
//! ```text
//! (1 / (2 Σw)) Σᵢ wᵢ (yᵢ − offsetᵢ − b − x̃ᵢᵀβ̃)² + λ ‖β̃‖₁
//! ```
//!
//! with an unpenalized intercept `b`. Predictors are standardized to
//! weighted mean 0 and weighted variance 1 (population variance, weights
//! normalized to sum to one) and coefficients are reported on the original
//! scale. The coordinate updates work on the weighted Gram matrix of the
//! standardized design ("covariance updates"), so each sweep costs O(p²) at
//! worst regardless of n. Cross-validation builds the per-fold Gram matrices
//! by subtracting the held-out fold's moments from the full-data moments.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `sign(z) · max(|z| − t, 0)`.
#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// A weighted regression problem. Borrowed views; nothing is copied until a
/// solver runs.
#[derive(Clone, Debug)]
pub struct DesignProblem<'a> {
    x: ArrayView2<'a, f64>,
    y: ArrayView1<'a, f64>,
    weights: Option<ArrayView1<'a, f64>>,
    offset: Option<ArrayView1<'a, f64>>,
}

impl<'a> DesignProblem<'a> {
    pub fn new(x: ArrayView2<'a, f64>, y: ArrayView1<'a, f64>) -> Result<Self> {
        let (n, p) = x.dim();
        if n == 0 || p == 0 {
            return Err(Error::InvalidInput(format!(
                "design must have at least one row and column, got {n}x{p}"
            )));
        }
        if y.len() != n {
            return Err(Error::Dimension(format!(
                "response has {} entries, design has {n} rows",
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("design contains non-finite values".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("response contains non-finite values".into()));
        }
        Ok(Self {
            x,
            y,
            weights: None,
            offset: None,
        })
    }

    pub fn with_weights(mut self, w: ArrayView1<'a, f64>) -> Result<Self> {
        if w.len() != self.n() {
            return Err(Error::Dimension(format!(
                "weights have {} entries, design has {} rows",
                w.len(),
                self.n()
            )));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
        }
        if w.sum() <= 0.0 {
            return Err(Error::InvalidInput("weights must have a positive sum".into()));
        }
        self.weights = Some(w);
        Ok(self)
    }

    /// The offset is subtracted from `y` before fitting.
    pub fn with_offset(mut self, offset: ArrayView1<'a, f64>) -> Result<Self> {
        if offset.len() != self.n() {
            return Err(Error::Dimension(format!(
                "offset has {} entries, design has {} rows",
                offset.len(),
                self.n()
            )));
        }
        if offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("offset contains non-finite values".into()));
        }
        self.offset = Some(offset);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> ArrayView2<'a, f64> {
        self.x
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }

    /// Response with the offset removed.
    pub fn target(&self, i: usize) -> f64 {
        self.y[i] - self.offset.map_or(0.0, |o| o[i])
    }

    fn positive_weight_rows(&self) -> usize {
        match self.weights {
            Some(w) => w.iter().filter(|v| **v > 0.0).count(),
            None => self.n(),
        }
    }
}

/// Which lambda `cv_lasso` keeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    /// Minimum mean CV error.
    #[default]
    Min,
    /// Largest lambda whose mean CV error is within one standard error of the minimum.
    OneSe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoOptions {
    /// Convergence threshold on the largest standardized coefficient change in a sweep.
    pub tol: f64,
    pub max_iter: usize,
    pub standardize: bool,
    pub fit_intercept: bool,
    pub n_lambda: usize,
    /// `None` picks 1e-2 when n < p and 1e-4 otherwise.
    pub min_ratio: Option<f64>,
    pub k_folds: usize,
    pub rule: LambdaRule,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 100_000,
            standardize: true,
            fit_intercept: true,
            n_lambda: 100,
            min_ratio: None,
            k_folds: 10,
            rule: LambdaRule::Min,
        }
    }
}

/// Result of a single-lambda fit.
#[derive(Clone, Debug, PartialEq)]
pub struct LassoSolution {
    pub beta: Array1<f64>,
    pub intercept: f64,
    /// Columns with zero weighted variance; their coefficients are forced to 0.
    pub degenerate: Vec<usize>,
    pub sweeps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub cv_mean: f64,
    /// Standard error of the mean CV error across folds.
    pub cv_sd: f64,
}

/// A cross-validated LASSO fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub lambda_selected: f64,
    pub path: Vec<PathPoint>,
    pub degenerate: Vec<usize>,
    pub rule: LambdaRule,
}

impl LassoFit {
    pub fn predict_row(&self, x: ArrayView1<f64>) -> f64 {
        self.intercept + self.beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

/// Raw weighted moments of a row subset, accumulated about a fixed shift.
#[derive(Clone, Debug)]
struct Moments {
    sw: f64,
    sx: Array1<f64>,
    sy: f64,
    sxx: Array2<f64>,
    sxy: Array1<f64>,
    syy: f64,
}

impl Moments {
    fn of_rows(prob: &DesignProblem, rows: &[usize], shift_x: &Array1<f64>, shift_y: f64) -> Self {
        let p = prob.p();
        let m = rows.len();
        let mut xs = Array2::<f64>::zeros((m, p));
        let mut ys = Array1::<f64>::zeros(m);
        let mut sw = 0.0;
        let mut sx = Array1::<f64>::zeros(p);
        let mut sy = 0.0;
        let mut syy = 0.0;
        for (r, &i) in rows.iter().enumerate() {
            let w = prob.weight(i);
            let sq = w.sqrt();
            let yc = prob.target(i) - shift_y;
            sw += w;
            sy += w * yc;
            syy += w * yc * yc;
            ys[r] = sq * yc;
            let xi = prob.x.row(i);
            let mut dst = xs.row_mut(r);
            for j in 0..p {
                let v = xi[j] - shift_x[j];
                sx[j] += w * v;
                dst[j] = sq * v;
            }
        }
        let sxx = xs.t().dot(&xs);
        let sxy = xs.t().dot(&ys);
        Self {
            sw,
            sx,
            sy,
            sxx,
            sxy,
            syy,
        }
    }

    fn minus(&self, other: &Moments) -> Self {
        Self {
            sw: self.sw - other.sw,
            sx: &self.sx - &other.sx,
            sy: self.sy - other.sy,
            sxx: &self.sxx - &other.sxx,
            sxy: &self.sxy - &other.sxy,
            syy: self.syy - other.syy,
        }
    }
}

/// Standardized normal-equation system: everything the coordinate updates need.
#[derive(Clone, Debug)]
pub(crate) struct StandardizedSystem {
    /// Column means in shifted coordinates (0 when no intercept).
    mean_x: Array1<f64>,
    scale: Array1<f64>,
    mean_y: f64,
    gram: Array2<f64>,
    xy: Array1<f64>,
    /// (1/Σw) Σ w (y − ȳ)².
    yy: f64,
    degenerate: Vec<bool>,
}

impl StandardizedSystem {
    fn from_moments(mo: &Moments, opts: &LassoOptions) -> Self {
        let p = mo.sx.len();
        let sw = mo.sw;
        let (mean_x, mean_y) = if opts.fit_intercept {
            (&mo.sx / sw, mo.sy / sw)
        } else {
            (Array1::zeros(p), 0.0)
        };
        let mut cov = &mo.sxx / sw;
        for j in 0..p {
            for k in 0..p {
                cov[[j, k]] -= mean_x[j] * mean_x[k];
            }
        }
        let mut cxy = &mo.sxy / sw;
        for j in 0..p {
            cxy[j] -= mean_x[j] * mean_y;
        }
        let yy = (mo.syy / sw - mean_y * mean_y).max(0.0);

        let mut degenerate = vec![false; p];
        let mut scale = Array1::<f64>::ones(p);
        for j in 0..p {
            let raw = mo.sxx[[j, j]] / sw;
            if cov[[j, j]] <= 1e-13 * raw.max(1.0) {
                degenerate[j] = true;
            } else if opts.standardize {
                scale[j] = cov[[j, j]].sqrt();
            }
        }
        let mut gram = cov;
        for j in 0..p {
            for k in 0..p {
                gram[[j, k]] = if degenerate[j] || degenerate[k] {
                    0.0
                } else {
                    gram[[j, k]] / (scale[j] * scale[k])
                };
            }
        }
        let xy = Array1::from_iter(
            (0..p).map(|j| if degenerate[j] { 0.0 } else { cxy[j] / scale[j] }),
        );
        Self {
            mean_x,
            scale,
            mean_y,
            gram,
            xy,
            yy,
            degenerate,
        }
    }

    fn lambda_max(&self) -> f64 {
        self.xy.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Back-transform a standardized coefficient vector to shifted original coordinates.
    fn unstandardize(&self, beta_std: &Array1<f64>) -> (Array1<f64>, f64) {
        let beta = beta_std / &self.scale;
        let intercept = self.mean_y - beta.dot(&self.mean_x);
        (beta, intercept)
    }
}

/// Cyclic coordinate descent on a standardized system.
pub(crate) struct CoordinateDescent<'s> {
    sys: &'s StandardizedSystem,
    beta: Array1<f64>,
    /// Gram · beta, kept in sync with every coordinate move.
    g_beta: Array1<f64>,
}

impl<'s> CoordinateDescent<'s> {
    pub(crate) fn new(sys: &'s StandardizedSystem) -> Self {
        let p = sys.xy.len();
        Self {
            sys,
            beta: Array1::zeros(p),
            g_beta: Array1::zeros(p),
        }
    }

    #[cfg(test)]
    fn warm(sys: &'s StandardizedSystem, beta: Array1<f64>) -> Self {
        let g_beta = sys.gram.dot(&beta);
        Self { sys, beta, g_beta }
    }

    /// One full pass over the coordinates. Returns the largest absolute change.
    pub(crate) fn sweep(&mut self, lambda: f64) -> f64 {
        let mut max_change = 0.0_f64;
        for j in 0..self.beta.len() {
            max_change = max_change.max(self.update(j, lambda));
        }
        max_change
    }

    fn update(&mut self, j: usize, lambda: f64) -> f64 {
        let sys = self.sys;
        let gjj = sys.gram[[j, j]];
        if sys.degenerate[j] || gjj <= 0.0 {
            return 0.0;
        }
        let old = self.beta[j];
        let z = sys.xy[j] - self.g_beta[j] + gjj * old;
        let new = soft_threshold(z, lambda) / gjj;
        if new == old {
            return 0.0;
        }
        let delta = new - old;
        self.beta[j] = new;
        self.g_beta.scaled_add(delta, &sys.gram.column(j));
        delta.abs()
    }

    /// Fraction of the (centered) response variance explained.
    fn dev_ratio(&self) -> f64 {
        let b = &self.beta;
        let rss = self.sys.yy - 2.0 * b.dot(&self.sys.xy) + b.dot(&self.g_beta);
        1.0 - rss / self.sys.yy
    }

    /// Penalized objective on the standardized scale, intercept profiled out.
    #[cfg(test)]
    pub(crate) fn objective(&self, lambda: f64) -> f64 {
        let b = &self.beta;
        0.5 * (self.sys.yy - 2.0 * b.dot(&self.sys.xy) + b.dot(&self.g_beta))
            + lambda * b.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Full sweeps alternate with an exact minimization over the current
    /// active set (falling back to coordinate passes on that set when its
    /// Gram block is singular). Convergence is only declared after a full
    /// sweep.
    fn solve(&mut self, lambda: f64, tol: f64, max_iter: usize) -> std::result::Result<usize, f64> {
        let mut sweeps = 0;
        let mut last = f64::INFINITY;
        while sweeps < max_iter {
            last = self.sweep(lambda);
            sweeps += 1;
            if last < tol {
                return Ok(sweeps);
            }
            let active: Vec<usize> = (0..self.beta.len()).filter(|&j| self.beta[j] != 0.0).collect();
            if self.active_step(active.clone(), lambda) {
                continue;
            }
            while sweeps < max_iter {
                let mut change = 0.0_f64;
                for &j in &active {
                    change = change.max(self.update(j, lambda));
                }
                sweeps += 1;
                last = change;
                if change < tol {
                    break;
                }
            }
        }
        Err(last)
    }

    /// Minimize the objective over coefficients supported on `active` with
    /// their current signs. Each round either solves the stationarity
    /// equations G_AA b = xy_A − λ s and moves toward b, or, when G_AA is
    /// singular, moves along a null direction d of G_AA with sᵀd < 0 (the
    /// smooth part is flat there and the penalty falls). A move stops where a
    /// coefficient reaches zero; that coordinate leaves the set and the next
    /// round starts. Every move lowers the objective. Returns false when no
    /// usable direction exists.
    fn active_step(&mut self, mut active: Vec<usize>, lambda: f64) -> bool {
        let sys = self.sys;
        while !active.is_empty() {
            let m = active.len();
            let g = DMatrix::from_fn(m, m, |r, c| sys.gram[[active[r], active[c]]]);
            let signs = DVector::from_fn(m, |r, _| self.beta[active[r]].signum());
            let (direction, full_step) = match newton_target(&g, &signs, &active, sys, lambda) {
                Some(b) => {
                    let cur = DVector::from_fn(m, |r, _| self.beta[active[r]]);
                    (b - cur, true)
                }
                None => match null_descent(&g, &signs) {
                    Some(d) => (d, false),
                    None => return false,
                },
            };
            // largest step along `direction` that keeps every sign
            let mut t = if full_step { 1.0 } else { f64::INFINITY };
            let mut blocking = None;
            for (r, &j) in active.iter().enumerate() {
                let (cur, d) = (self.beta[j], direction[r]);
                if d != 0.0 && d.signum() != cur.signum() {
                    let frac = -cur / d;
                    if frac < t {
                        t = frac;
                        blocking = Some(r);
                    }
                }
            }
            if !t.is_finite() {
                return false;
            }
            for (r, &j) in active.iter().enumerate() {
                self.beta[j] = if Some(r) == blocking { 0.0 } else { self.beta[j] + t * direction[r] };
            }
            self.g_beta = sys.gram.dot(&self.beta);
            if blocking.is_none() {
                break;
            }
            active.retain(|&j| self.beta[j] != 0.0);
        }
        true
    }
}

/// Relative pivot or eigenvalue size below which a Gram block counts as singular.
const SINGULAR_RTOL: f64 = 1e-10;

/// Solution of G b = xy_A − λ s, or None if G is numerically singular.
fn newton_target(
    g: &DMatrix<f64>,
    signs: &DVector<f64>,
    active: &[usize],
    sys: &StandardizedSystem,
    lambda: f64,
) -> Option<DVector<f64>> {
    let chol = g.clone().cholesky()?;
    let l = chol.l_dirty();
    let pivots: Vec<f64> = (0..g.nrows()).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let max = pivots.iter().cloned().fold(0.0_f64, f64::max);
    if pivots.iter().any(|&d| d <= SINGULAR_RTOL * max) {
        return None;
    }
    let rhs = DVector::from_fn(g.nrows(), |r, _| sys.xy[active[r]] - lambda * signs[r]);
    let b = chol.solve(&rhs);
    b.iter().all(|v| v.is_finite()).then_some(b)
}

/// A unit vector d with G d ≈ 0 and sᵀd < 0, if G is singular.
fn null_descent(g: &DMatrix<f64>, signs: &DVector<f64>) -> Option<DVector<f64>> {
    let eig = g.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut best: Option<DVector<f64>> = None;
    let mut best_slope = 0.0;
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev.abs() > SINGULAR_RTOL * max.max(1.0) {
            continue;
        }
        let v = eig.eigenvectors.column(k).into_owned();
        let slope = signs.dot(&v);
        if slope.abs() > best_slope {
            best_slope = slope.abs();
            best = Some(if slope > 0.0 { -v } else { v });
        }
    }
    if best_slope < 1e-8 {
        return None;
    }
    best
}

fn validate_lambda_opts(opts: &LassoOptions) -> Result<()> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidInput(format!("tol must be positive, got {}", opts.tol)));
    }
    if opts.max_iter == 0 {
        return Err(Error::InvalidInput("max_iter must be positive".into()));
    }
    Ok(())
}

fn shifts(prob: &DesignProblem, opts: &LassoOptions) -> (Array1<f64>, f64) {
    let p = prob.p();
    if !opts.fit_intercept {
        return (Array1::zeros(p), 0.0);
    }
    let mut sw = 0.0;
    let mut sx = Array1::<f64>::zeros(p);
    let mut sy = 0.0;
    for i in 0..prob.n() {
        let w = prob.weight(i);
        sw += w;
        sy += w * prob.target(i);
        sx.scaled_add(w, &prob.x.row(i));
    }
    (sx / sw, sy / sw)
}

struct Prepared {
    shift_x: Array1<f64>,
    shift_y: f64,
    total: Moments,
    sys: StandardizedSystem,
}

fn prepare(prob: &DesignProblem, opts: &LassoOptions) -> Prepared {
    let (shift_x, shift_y) = shifts(prob, opts);
    let rows: Vec<usize> = (0..prob.n()).collect();
    let total = Moments::of_rows(prob, &rows, &shift_x, shift_y);
    let sys = StandardizedSystem::from_moments(&total, opts);
    Prepared {
        shift_x,
        shift_y,
        total,
        sys,
    }
}

fn to_original(prep: &Prepared, sys: &StandardizedSystem, beta_std: &Array1<f64>) -> (Array1<f64>, f64) {
    let (beta, b_shifted) = sys.unstandardize(beta_std);
    let intercept = if prep.shift_y == 0.0 && prep.shift_x.iter().all(|v| *v == 0.0) {
        b_shifted
    } else {
        prep.shift_y + b_shifted - beta.dot(&prep.shift_x)
    };
    (beta, intercept)
}

fn response_is_constant(prob: &DesignProblem) -> bool {
    let mut first = None;
    for i in 0..prob.n() {
        if prob.weight(i) <= 0.0 {
            continue;
        }
        let t = prob.target(i);
        match first {
            None => first = Some(t),
            Some(f) if f != t => return false,
            _ => {}
        }
    }
    true
}

fn degenerate_indices(sys: &StandardizedSystem) -> Vec<usize> {
    sys.degenerate
        .iter()
        .enumerate()
        .filter_map(|(j, d)| d.then_some(j))
        .collect()
}

/// Fit the LASSO at a single penalty. `lambda = 0` gives weighted least squares
/// and requires at least as many weighted rows as non-degenerate columns.
pub fn fit_lasso(prob: &DesignProblem, lambda: f64, opts: &LassoOptions) -> Result<LassoSolution> {
    validate_lambda_opts(opts)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let prep = prepare(prob, opts);
    let active = prep.sys.degenerate.iter().filter(|d| !**d).count();
    if lambda == 0.0 {
        let rows = prob.positive_weight_rows();
        if rows < active + usize::from(opts.fit_intercept) {
            return Err(Error::Singular(format!(
                "least squares needs n >= p: {rows} weighted rows for {active} columns"
            )));
        }
    }
    let mut cd = CoordinateDescent::new(&prep.sys);
    let outcome = cd.solve(lambda, opts.tol, opts.max_iter);
    let (beta, intercept) = to_original(&prep, &prep.sys, &cd.beta);
    match outcome {
        Ok(sweeps) => Ok(LassoSolution {
            beta,
            intercept,
            degenerate: degenerate_indices(&prep.sys),
            sweeps,
        }),
        Err(max_change) => Err(Error::NonConvergence {
            sweeps: opts.max_iter,
            max_change,
            beta: beta.to_vec(),
            intercept,
        }),
    }
}

fn lambda_max_of(prob: &DesignProblem, sys: &StandardizedSystem) -> Result<f64> {
    if response_is_constant(prob) {
        return Err(Error::DegenerateResponse);
    }
    let lmax = sys.lambda_max();
    if !(lmax > 0.0) {
        return Err(Error::DegenerateResponse);
    }
    Ok(lmax)
}

fn geometric_path(lambda_max: f64, n_lambda: usize, min_ratio: f64) -> Vec<f64> {
    let last = (n_lambda - 1) as f64;
    (0..n_lambda)
        .map(|k| {
            if k == 0 {
                lambda_max
            } else {
                lambda_max * min_ratio.powf(k as f64 / last)
            }
        })
        .collect()
}

fn default_min_ratio(prob: &DesignProblem) -> f64 {
    if prob.positive_weight_rows() < prob.p() {
        1e-2
    } else {
        1e-4
    }
}

/// Geometric sequence from `lambda_max` (smallest penalty giving the null
/// model) down to `lambda_max · min_ratio`.
pub fn lambda_path(
    prob: &DesignProblem,
    n_lambda: usize,
    min_ratio: f64,
    opts: &LassoOptions,
) -> Result<Vec<f64>> {
    if n_lambda < 2 {
        return Err(Error::InvalidInput(format!("n_lambda must be >= 2, got {n_lambda}")));
    }
    if !(min_ratio > 0.0 && min_ratio < 1.0) {
        return Err(Error::InvalidInput(format!("min_ratio must lie in (0, 1), got {min_ratio}")));
    }
    let prep = prepare(prob, opts);
    let lmax = lambda_max_of(prob, &prep.sys)?;
    Ok(geometric_path(lmax, n_lambda, min_ratio))
}

/// Fold id per row: a seeded permutation dealt round-robin.
pub fn cv_fold_ids(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut ids = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        ids[i] = pos % k;
    }
    ids
}

// Path termination as in glmnet: stop once the explained deviance exceeds
// DEV_MAX, or (after MIN_PATH points) when it improves by less than a
// fraction DEV_FRAC of itself.
const DEV_MAX: f64 = 0.99999;
const DEV_FRAC: f64 = 1e-5;
const MIN_PATH: usize = 5;

/// Warm-started solutions (standardized scale) for a prefix of `lambdas`.
fn fit_path(
    prep: &Prepared,
    sys: &StandardizedSystem,
    lambdas: &[f64],
    opts: &LassoOptions,
) -> Result<Vec<Array1<f64>>> {
    let mut cd = CoordinateDescent::new(sys);
    let mut out = Vec::with_capacity(lambdas.len());
    let mut prev_dev = 0.0;
    for (l, &lambda) in lambdas.iter().enumerate() {
        if let Err(max_change) = cd.solve(lambda, opts.tol, opts.max_iter) {
            let (beta, b) = to_original(prep, sys, &cd.beta);
            return Err(Error::NonConvergence {
                sweeps: opts.max_iter,
                max_change,
                beta: beta.to_vec(),
                intercept: b,
            });
        }
        out.push(cd.beta.clone());
        let dev = if sys.yy > 0.0 { cd.dev_ratio() } else { 1.0 };
        if dev > DEV_MAX || (l + 1 >= MIN_PATH && dev - prev_dev < DEV_FRAC * dev) {
            break;
        }
        prev_dev = dev;
    }
    Ok(out)
}

/// K-fold cross-validated LASSO over the default lambda path, refit on all rows
/// at the selected penalty.
pub fn cv_lasso(prob: &DesignProblem, opts: &LassoOptions, seed: u64) -> Result<LassoFit> {
    validate_lambda_opts(opts)?;
    let n = prob.n();
    let k = opts.k_folds;
    if k < 2 || k > n {
        return Err(Error::InvalidInput(format!("k_folds must lie in [2, n = {n}], got {k}")));
    }
    let min_ratio = opts.min_ratio.unwrap_or_else(|| default_min_ratio(prob));
    if opts.n_lambda < 2 {
        return Err(Error::InvalidInput(format!("n_lambda must be >= 2, got {}", opts.n_lambda)));
    }
    if !(min_ratio > 0.0 && min_ratio < 1.0) {
        return Err(Error::InvalidInput(format!("min_ratio must lie in (0, 1), got {min_ratio}")));
    }

    let prep = prepare(prob, opts);
    let lmax = lambda_max_of(prob, &prep.sys)?;
    let full_path = geometric_path(lmax, opts.n_lambda, min_ratio);
    // the full-data path decides how far down the sequence CV looks
    let full = fit_path(&prep, &prep.sys, &full_path, opts)?;
    let lambdas = &full_path[..full.len()];

    let ids = cv_fold_ids(n, k, seed);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &f) in ids.iter().enumerate() {
        folds[f].push(i);
    }
    if let Some(small) = folds.iter().position(|f| f.len() < 2) {
        return Err(Error::InvalidInput(format!(
            "CV fold {small} has {} observations; need at least 2",
            folds[small].len()
        )));
    }

    let n_l = lambdas.len();
    let p = prob.p();
    let mut fold_err = Array2::<f64>::zeros((k, n_l));
    let mut fold_w = vec![0.0; k];
    for (f, rows) in folds.iter().enumerate() {
        let held = Moments::of_rows(prob, rows, &prep.shift_x, prep.shift_y);
        let train = prep.total.minus(&held);
        if train.sw <= 0.0 || held.sw <= 0.0 {
            return Err(Error::InvalidInput(format!("CV fold {f} has no positive weight")));
        }
        let sys = StandardizedSystem::from_moments(&train, opts);

        // a fold path that stops early carries its last solution forward
        let sols = fit_path(&prep, &sys, lambdas, opts)?;
        let mut betas = Array2::<f64>::zeros((p, n_l));
        let mut intercepts = Array1::<f64>::zeros(n_l);
        for l in 0..n_l {
            let (beta, b) = sys.unstandardize(&sols[l.min(sols.len() - 1)]);
            betas.column_mut(l).assign(&beta);
            intercepts[l] = b;
        }

        let m = rows.len();
        let mut xs = Array2::<f64>::zeros((m, p));
        for (r, &i) in rows.iter().enumerate() {
            let mut dst = xs.row_mut(r);
            dst.assign(&prob.x.row(i));
            dst -= &prep.shift_x;
        }
        let preds = xs.dot(&betas);
        let mut sse = Array1::<f64>::zeros(n_l);
        for (r, &i) in rows.iter().enumerate() {
            let w = prob.weight(i);
            let yc = prob.target(i) - prep.shift_y;
            for l in 0..n_l {
                let e = yc - intercepts[l] - preds[[r, l]];
                sse[l] += w * e * e;
            }
        }
        fold_w[f] = held.sw;
        fold_err.row_mut(f).assign(&(sse / held.sw));
    }

    let total_w: f64 = fold_w.iter().sum();
    let mut path = Vec::with_capacity(n_l);
    for (l, &lambda) in lambdas.iter().enumerate() {
        let col = fold_err.column(l);
        let mean = col.iter().zip(&fold_w).map(|(e, w)| e * w).sum::<f64>() / total_w;
        let var = col
            .iter()
            .zip(&fold_w)
            .map(|(e, w)| w * (e - mean).powi(2))
            .sum::<f64>()
            / total_w
            / (k as f64 - 1.0);
        path.push(PathPoint {
            lambda,
            cv_mean: mean,
            cv_sd: var.sqrt(),
        });
    }

    let selected = select_lambda(&path, opts.rule);
    let (beta, intercept) = to_original(&prep, &prep.sys, &full[selected]);
    Ok(LassoFit {
        beta: beta.to_vec(),
        intercept,
        lambda_selected: lambdas[selected],
        path,
        degenerate: degenerate_indices(&prep.sys),
        rule: opts.rule,
    })
}

/// Index into `path` chosen by `rule`. Ties go to the larger lambda.
fn select_lambda(path: &[PathPoint], rule: LambdaRule) -> usize {
    let mut best = 0;
    for (l, pt) in path.iter().enumerate() {
        if pt.cv_mean < path[best].cv_mean {
            best = l;
        }
    }
    match rule {
        LambdaRule::Min => best,
        LambdaRule::OneSe => {
            let bound = path[best].cv_mean + path[best].cv_sd;
            path.iter().position(|pt| pt.cv_mean <= bound).unwrap_or(best)
        }
    }
}

/// Residual correlations `(1/Σw) Σᵢ wᵢ x̃ᵢⱼ rᵢ` of a solution, computed directly
/// from the data (not from the Gram matrix). `x̃` is the design column after the
/// same centering/scaling the solver applies; with `standardize = false` and no
/// intercept it is the raw column. At a LASSO optimum each entry equals
/// `lambda · sign(beta_j)` on the support and lies in `[-lambda, lambda]` off it.
pub fn kkt_gradient(
    prob: &DesignProblem,
    beta: ArrayView1<f64>,
    intercept: f64,
    opts: &LassoOptions,
) -> Array1<f64> {
    let n = prob.n();
    let p = prob.p();
    let sw: f64 = (0..n).map(|i| prob.weight(i)).sum();
    let mut mean = Array1::<f64>::zeros(p);
    if opts.fit_intercept {
        for i in 0..n {
            mean.scaled_add(prob.weight(i) / sw, &prob.x.row(i));
        }
    }
    let mut scale = Array1::<f64>::ones(p);
    if opts.standardize {
        for j in 0..p {
            let col = prob.x.column(j);
            let v: f64 = (0..n)
                .map(|i| prob.weight(i) * (col[i] - mean[j]).powi(2))
                .sum::<f64>()
                / sw;
            if v > 0.0 {
                scale[j] = v.sqrt();
            }
        }
    }
    let resid = Array1::from_iter((0..n).map(|i| {
        prob.target(i) - intercept - prob.x.row(i).dot(&beta)
    }));
    let mut grad = Array1::<f64>::zeros(p);
    for i in 0..n {
        let wr = prob.weight(i) * resid[i] / sw;
        let xi = prob.x.row(i);
        for j in 0..p {
            grad[j] += wr * (xi[j] - mean[j]) / scale[j];
        }
    }
    grad
}

/// `beta` expressed on the standardized scale used by `kkt_gradient`.
pub fn standardized_beta(prob: &DesignProblem, beta: ArrayView1<f64>, opts: &LassoOptions) -> Array1<f64> {
    if !opts.standardize {
        return beta.to_owned();
    }
    let n = prob.n();
    let sw: f64 = (0..n).map(|i| prob.weight(i)).sum();
    let x = prob.x;
    let mut out = beta.to_owned();
    for j in 0..prob.p() {
        let col = x.column(j);
        let mean = if opts.fit_intercept {
            (0..n).map(|i| prob.weight(i) * col[i]).sum::<f64>() / sw
        } else {
            0.0
        };
        let v = (0..n).map(|i| prob.weight(i) * (col[i] - mean).powi(2)).sum::<f64>() / sw;
        out[j] *= v.sqrt();
    }
    out
}
