//! Synthetic trial/observational data with sparse outcome shift.
//!
//! Covariates are Gaussian with an AR(1) covariance. Each arm of the
//! observational study has a sparse coefficient vector; the trial arms add a
//! few planted shifts to those vectors, shift the covariate means, and
//! randomize treatment with a constant probability. The observational study
//! assigns treatment through a logistic model on a handful of covariates.
//! An optional misspecification adds `m · g(x_j)` (g quadratic by default)
//! for every nonzero coefficient.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ArmPair, PropensitySpec, Study, StudyDataset};
use crate::error::{Error, Result};

/// Form of the per-coordinate nonlinearity added under misspecification.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisspecKind {
    #[default]
    Quadratic,
    Sine,
}

impl MisspecKind {
    fn apply(self, v: f64) -> f64 {
        match self {
            MisspecKind::Quadratic => v * v,
            MisspecKind::Sine => v.sin(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub p: usize,
    pub n_o: usize,
    pub n_r: usize,
    pub support_size: usize,
    pub noise_sd: f64,
    pub os_logistic_dim: usize,
    pub shift_covariates: usize,
    pub outcome_shift_per_arm: usize,
    pub misspecified: bool,
    pub misspec_kind: MisspecKind,
    pub removed_modifier_fraction: f64,
    /// AR(1) correlation of the covariates.
    pub rho: f64,
    /// Expected treated fraction the observational intercept is tuned to.
    pub os_treated_target: f64,
    pub rct_pi_plus: f64,
    /// Monte-Carlo draws used when tuning the observational intercept.
    pub propensity_probe_draws: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            p: 100,
            n_o: 10_000,
            n_r: 250,
            support_size: 10,
            noise_sd: 1.0 / 3.0,
            os_logistic_dim: 10,
            shift_covariates: 10,
            outcome_shift_per_arm: 2,
            misspecified: false,
            misspec_kind: MisspecKind::Quadratic,
            removed_modifier_fraction: 0.0,
            rho: 0.5,
            os_treated_target: 1.0 / 3.0,
            rct_pi_plus: 0.5,
            propensity_probe_draws: 100_000,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.p == 0 || self.n_o == 0 || self.n_r == 0 {
            return bad("p, n_o and n_r must be positive".into());
        }
        if self.support_size == 0 || self.support_size > self.p {
            return bad(format!("support_size must lie in [1, p = {}]", self.p));
        }
        if self.os_logistic_dim > self.p || self.shift_covariates > self.p || self.outcome_shift_per_arm > self.p {
            return bad("covariate counts cannot exceed p".into());
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return bad(format!("noise_sd must be finite and >= 0, got {}", self.noise_sd));
        }
        if !(0.0..=0.5).contains(&self.removed_modifier_fraction) {
            return bad(format!(
                "removed_modifier_fraction must lie in [0, 0.5], got {}",
                self.removed_modifier_fraction
            ));
        }
        if !(self.rho.abs() < 1.0) {
            return bad(format!("rho must lie in (-1, 1), got {}", self.rho));
        }
        if !(self.os_treated_target > 0.0 && self.os_treated_target < 1.0) {
            return bad(format!("os_treated_target must lie in (0, 1), got {}", self.os_treated_target));
        }
        if !(self.rct_pi_plus > 0.0 && self.rct_pi_plus < 1.0) {
            return Err(Error::Positivity(self.rct_pi_plus));
        }
        if self.propensity_probe_draws == 0 {
            return bad("propensity_probe_draws must be positive".into());
        }
        Ok(())
    }
}

/// Sparse map coordinate → coefficient of the nonlinear term.
pub type QuadTerms = Vec<(usize, f64)>;

/// Everything needed to evaluate the true potential-outcome means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub p: usize,
    pub rho: f64,
    pub beta_o: ArmPair<Vec<f64>>,
    pub beta_r: ArmPair<Vec<f64>>,
    pub quad_o: ArmPair<QuadTerms>,
    pub quad_r: ArmPair<QuadTerms>,
    pub misspec_kind: MisspecKind,
    pub rct_mean_shift: Vec<f64>,
    pub os_logistic: PropensitySpec,
    pub rct_pi_plus: f64,
    pub removed_indices: Vec<usize>,
    pub seed: u64,
}

impl GroundTruth {
    /// Conditional potential-outcome mean μ^s_a(x) on the full covariate vector.
    pub fn mu(&self, study: Study, arm: i8, x: ArrayView1<f64>) -> f64 {
        let (beta, quad) = match study {
            Study::Os => (self.beta_o.get(arm), self.quad_o.get(arm)),
            Study::Rct => (self.beta_r.get(arm), self.quad_r.get(arm)),
        };
        let lin: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
        let nonlin: f64 = quad.iter().map(|&(j, m)| m * self.misspec_kind.apply(x[j])).sum();
        lin + nonlin
    }

    /// Trial-population CFACE: π₊ μ₋(x) + π₋ μ₊(x).
    pub fn rct_cface(&self, x: ArrayView1<f64>) -> f64 {
        let pi = self.rct_pi_plus;
        pi * self.mu(Study::Rct, -1, x) + (1.0 - pi) * self.mu(Study::Rct, 1, x)
    }

    /// Coordinates that modify the treatment effect in either study.
    pub fn effect_modifiers(&self) -> Vec<usize> {
        let differs = |pair: &ArmPair<Vec<f64>>, j: usize| pair.minus[j] != pair.plus[j];
        let quad_differs = |pair: &ArmPair<QuadTerms>, j: usize| {
            let find = |q: &QuadTerms| q.iter().find(|(k, _)| *k == j).map(|(_, m)| *m);
            find(&pair.minus) != find(&pair.plus)
        };
        (0..self.p)
            .filter(|&j| {
                differs(&self.beta_r, j)
                    || differs(&self.beta_o, j)
                    || quad_differs(&self.quad_r, j)
                    || quad_differs(&self.quad_o, j)
            })
            .collect()
    }

    /// Columns still visible to the estimators.
    pub fn observed_columns(&self) -> Vec<usize> {
        let removed: BTreeSet<usize> = self.removed_indices.iter().copied().collect();
        (0..self.p).filter(|j| !removed.contains(j)).collect()
    }

    pub fn covariance(&self) -> Array2<f64> {
        make_covariance(self.p, self.rho).expect("validated at generation")
    }
}

/// τ^r(x) = μ^r₊(x) − μ^r₋(x).
pub fn true_cate(truth: &GroundTruth, x: ArrayView1<f64>) -> f64 {
    truth.mu(Study::Rct, 1, x) - truth.mu(Study::Rct, -1, x)
}

/// AR(1) covariance Σ_jk = rho^|j−k|.
pub fn make_covariance(p: usize, rho: f64) -> Result<Array2<f64>> {
    if p == 0 {
        return Err(Error::InvalidInput("p must be positive".into()));
    }
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidInput(format!("rho must lie in (-1, 1), got {rho}")));
    }
    Ok(Array2::from_shape_fn((p, p), |(j, k)| rho.powi(j.abs_diff(k) as i32)))
}

/// Lower Cholesky factor.
pub fn cholesky(cov: &Array2<f64>) -> Result<Array2<f64>> {
    let (p, q) = cov.dim();
    if p != q {
        return Err(Error::Dimension(format!("covariance must be square, got {p}x{q}")));
    }
    let m = DMatrix::from_fn(p, p, |i, j| cov[[i, j]]);
    let chol = m.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l();
    Ok(Array2::from_shape_fn((p, p), |(i, j)| l[(i, j)]))
}

fn standard_normals<R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, p), || rng.sample(StandardNormal))
}

fn mvn_with_factor<R: Rng + ?Sized>(n: usize, mean: ArrayView1<f64>, chol: &Array2<f64>, rng: &mut R) -> Array2<f64> {
    let z = standard_normals(n, mean.len(), rng);
    let mut x = z.dot(&chol.t());
    x += &mean;
    x
}

/// `n` i.i.d. rows from N(mean, cov).
pub fn sample_mvn<R: Rng + ?Sized>(
    n: usize,
    mean: ArrayView1<f64>,
    cov: &Array2<f64>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if cov.nrows() != mean.len() {
        return Err(Error::Dimension(format!(
            "mean has {} entries, covariance is {}x{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let l = cholesky(cov)?;
    Ok(mvn_with_factor(n, mean, &l, rng))
}

/// Uniform on [−hi, −lo] ∪ [lo, hi].
fn signed_uniform<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    let mag = rng.gen_range(lo..=hi);
    if rng.gen::<bool>() {
        mag
    } else {
        -mag
    }
}

fn logistic(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

/// Intercept b with mean σ(b + ηᵢ) = target over the probe scores, by bisection.
fn tune_intercept(scores: &[f64], target: f64) -> f64 {
    let frac = |b: f64| scores.iter().map(|s| logistic(b + s)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    // upper end keeps the fraction at or above the target
    hi
}

fn draw_quad_terms<R: Rng + ?Sized>(beta: &[f64], rng: &mut R) -> QuadTerms {
    beta.iter()
        .enumerate()
        .filter(|(_, b)| **b != 0.0)
        .map(|(j, _)| (j, rng.gen_range(0.25..=0.5)))
        .collect()
}

pub fn gen_truth<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<GroundTruth> {
    cfg.validate()?;
    let p = cfg.p;
    let cov = make_covariance(p, cfg.rho)?;

    let mut draw_arm = || {
        let mut beta = vec![0.0; p];
        for j in sample(rng, p, cfg.support_size) {
            beta[j] = signed_uniform(1.0 / 3.0, 2.0 / 3.0, rng);
        }
        beta
    };
    let beta_o = ArmPair::new(draw_arm(), draw_arm());

    let mut beta_r = beta_o.clone();
    for arm in [-1i8, 1] {
        let b = beta_r.get_mut(arm);
        for j in sample(rng, p, cfg.outcome_shift_per_arm) {
            b[j] += signed_uniform(0.5, 1.0, rng);
        }
    }

    let mut rct_mean_shift = vec![0.0; p];
    for j in sample(rng, p, cfg.shift_covariates) {
        rct_mean_shift[j] = signed_uniform(0.25, 0.5, rng);
    }

    let logit_cols: Vec<usize> = {
        let mut v = sample(rng, p, cfg.os_logistic_dim).into_vec();
        v.sort_unstable();
        v
    };
    let mut coef = vec![0.0; p];
    for &j in &logit_cols {
        coef[j] = rng.gen_range(-1.0..=1.0);
    }
    let intercept = if logit_cols.is_empty() {
        let t = cfg.os_treated_target;
        (t / (1.0 - t)).ln()
    } else {
        // the score only involves the logistic covariates, so probe their marginal law
        let sub = Array2::from_shape_fn((logit_cols.len(), logit_cols.len()), |(a, b)| {
            cov[[logit_cols[a], logit_cols[b]]]
        });
        let sub_coef = Array1::from_iter(logit_cols.iter().map(|&j| coef[j]));
        let probes = sample_mvn(
            cfg.propensity_probe_draws,
            Array1::zeros(logit_cols.len()).view(),
            &sub,
            rng,
        )?;
        let scores = probes.dot(&sub_coef).to_vec();
        tune_intercept(&scores, cfg.os_treated_target)
    };

    let (quad_o, quad_r) = if cfg.misspecified {
        let qo = ArmPair::new(draw_quad_terms(&beta_o.minus, rng), draw_quad_terms(&beta_o.plus, rng));
        let qr = ArmPair::new(draw_quad_terms(&beta_r.minus, rng), draw_quad_terms(&beta_r.plus, rng));
        (qo, qr)
    } else {
        Default::default()
    };

    Ok(GroundTruth {
        p,
        rho: cfg.rho,
        beta_o,
        beta_r,
        quad_o,
        quad_r,
        misspec_kind: cfg.misspec_kind,
        rct_mean_shift,
        os_logistic: PropensitySpec::Logistic { coef, intercept },
        rct_pi_plus: cfg.rct_pi_plus,
        removed_indices: Vec::new(),
        seed: cfg.seed,
    })
}

fn outcomes<R: Rng + ?Sized>(
    truth: &GroundTruth,
    study: Study,
    x: &Array2<f64>,
    a: &[i8],
    noise_sd: f64,
    rng: &mut R,
) -> Array1<f64> {
    Array1::from_iter(x.axis_iter(Axis(0)).zip(a).map(|(row, &arm)| {
        let eps = if noise_sd > 0.0 {
            noise_sd * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        truth.mu(study, arm, row) + eps
    }))
}

/// Observational study: X ~ N(0, Σ), logistic treatment, Y = μ^o_A(X) + ε.
pub fn gen_os<R: Rng + ?Sized>(cfg: &SimConfig, truth: &GroundTruth, rng: &mut R) -> Result<StudyDataset> {
    cfg.validate()?;
    let cov = make_covariance(truth.p, truth.rho)?;
    let x = sample_mvn(cfg.n_o, Array1::zeros(truth.p).view(), &cov, rng)?;
    let a: Vec<i8> = x
        .axis_iter(Axis(0))
        .map(|row| {
            let pi = truth.os_logistic.prob_plus(row);
            if rng.gen::<f64>() < pi {
                1
            } else {
                -1
            }
        })
        .collect();
    let y = outcomes(truth, Study::Os, &x, &a, cfg.noise_sd, rng);
    StudyDataset::with_default_names(Study::Os, x, a, y)
}

/// Trial: X ~ N(shift, Σ), A = ±1 with constant probability, Y = μ^r_A(X) + ε.
pub fn gen_rct<R: Rng + ?Sized>(cfg: &SimConfig, truth: &GroundTruth, rng: &mut R) -> Result<StudyDataset> {
    cfg.validate()?;
    let x = sample_rct_covariates(cfg.n_r, truth, rng)?;
    let a: Vec<i8> = (0..cfg.n_r)
        .map(|_| if rng.gen::<f64>() < truth.rct_pi_plus { 1 } else { -1 })
        .collect();
    let y = outcomes(truth, Study::Rct, &x, &a, cfg.noise_sd, rng);
    StudyDataset::with_default_names(Study::Rct, x, a, y)
}

/// Fresh covariates from the trial population (used for evaluation).
pub fn sample_rct_covariates<R: Rng + ?Sized>(n: usize, truth: &GroundTruth, rng: &mut R) -> Result<Array2<f64>> {
    let cov = make_covariance(truth.p, truth.rho)?;
    sample_mvn(n, ArrayView1::from(&truth.rct_mean_shift), &cov, rng)
}

/// Hide `⌈fraction · #modifiers⌉` randomly chosen effect modifiers from both
/// datasets. The removed indices are recorded on `truth`, which keeps
/// evaluating the CATE on the full covariate vector.
pub fn drop_modifiers<R: Rng + ?Sized>(
    os: &StudyDataset,
    rct: &StudyDataset,
    truth: &mut GroundTruth,
    fraction: f64,
    rng: &mut R,
) -> Result<(StudyDataset, StudyDataset, Vec<usize>)> {
    if !(0.0..=0.5).contains(&fraction) {
        return Err(Error::InvalidInput(format!("removal fraction must lie in [0, 0.5], got {fraction}")));
    }
    os.check_aligned(rct)?;
    if os.p() != truth.p {
        return Err(Error::Dimension(format!("datasets have {} columns, truth has {}", os.p(), truth.p)));
    }
    let modifiers = truth.effect_modifiers();
    let count = (fraction * modifiers.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    if count == 0 {
        truth.removed_indices.clear();
        return Ok((os.clone(), rct.clone(), Vec::new()));
    }
    let mut removed: Vec<usize> = sample(rng, modifiers.len(), count)
        .into_iter()
        .map(|k| modifiers[k])
        .collect();
    removed.sort_unstable();
    truth.removed_indices = removed.clone();
    let keep = truth.observed_columns();
    Ok((os.select_columns(&keep)?, rct.select_columns(&keep)?, removed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use approx::assert_abs_diff_eq;
    use nalgebra::SymmetricEigen;
    use ndarray::array;

    fn small_cfg() -> SimConfig {
        SimConfig {
            p: 20,
            n_o: 2000,
            n_r: 400,
            propensity_probe_draws: 20_000,
            ..Default::default()
        }
    }

    #[test]
    fn ar1_covariance() {
        let c = make_covariance(2, 0.5).unwrap();
        assert_eq!(c, array![[1.0, 0.5], [0.5, 1.0]]);
        assert_eq!(make_covariance(3, 0.0).unwrap(), Array2::<f64>::eye(3));
        assert!(make_covariance(3, 1.0).is_err());
        assert!(make_covariance(3, -1.2).is_err());
    }

    #[test]
    fn default_covariance_is_positive_definite() {
        let c = make_covariance(100, 0.5).unwrap();
        let m = DMatrix::from_fn(100, 100, |i, j| c[[i, j]]);
        let eig = SymmetricEigen::new(m);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min > 0.0, "smallest eigenvalue {min}");
        assert!(c.iter().all(|v| *v != 0.0));
    }

    #[test]
    fn non_pd_covariance_is_rejected() {
        let bad = array![[1.0, 2.0], [2.0, 1.0]];
        let mut rng = rng_from(0);
        assert!(matches!(
            sample_mvn(3, Array1::zeros(2).view(), &bad, &mut rng),
            Err(Error::NotPositiveDefinite)
        ));
        let zero = Array2::zeros((2, 2));
        assert!(sample_mvn(1, Array1::zeros(2).view(), &zero, &mut rng).is_err());
    }

    #[test]
    fn standard_mvn_moments() {
        let mut rng = rng_from(1);
        let x = sample_mvn(100_000, Array1::zeros(3).view(), &Array2::eye(3), &mut rng).unwrap();
        for j in 0..3 {
            let col = x.column(j);
            let mean = col.mean().unwrap();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn mvn_correlation() {
        let mut rng = rng_from(2);
        let cov = make_covariance(2, 0.5).unwrap();
        let x = sample_mvn(100_000, Array1::zeros(2).view(), &cov, &mut rng).unwrap();
        let (a, b) = (x.column(0), x.column(1));
        let (ma, mb) = (a.mean().unwrap(), b.mean().unwrap());
        let cab: f64 = a.iter().zip(&b).map(|(u, v)| (u - ma) * (v - mb)).sum();
        let caa: f64 = a.iter().map(|u| (u - ma).powi(2)).sum();
        let cbb: f64 = b.iter().map(|v| (v - mb).powi(2)).sum();
        let r = cab / (caa * cbb).sqrt();
        assert!((r - 0.5).abs() < 0.02, "corr {r}");
    }

    #[test]
    fn truth_supports_and_magnitudes() {
        let cfg = SimConfig::default();
        let truth = gen_truth(&cfg, &mut rng_from(3)).unwrap();
        for arm in [-1i8, 1] {
            let b = truth.beta_o.get(arm);
            let nz: Vec<f64> = b.iter().copied().filter(|v| *v != 0.0).collect();
            assert_eq!(nz.len(), 10);
            assert!(nz.iter().all(|v| (1.0 / 3.0..=2.0 / 3.0).contains(&v.abs())));

            let diff: Vec<f64> = truth
                .beta_r
                .get(arm)
                .iter()
                .zip(b)
                .map(|(r, o)| r - o)
                .filter(|d| *d != 0.0)
                .collect();
            assert_eq!(diff.len(), 2);
            assert!(diff.iter().all(|d| (0.5 - 1e-12..=1.0 + 1e-12).contains(&d.abs())));
        }
        let shifted: Vec<f64> = truth.rct_mean_shift.iter().copied().filter(|v| *v != 0.0).collect();
        assert_eq!(shifted.len(), 10);
        assert!(shifted.iter().all(|v| (0.25..=0.5).contains(&v.abs())));
        assert!(truth.quad_o.plus.is_empty() && truth.quad_r.minus.is_empty());
    }

    #[test]
    fn no_shift_means_identical_coefficients() {
        let cfg = SimConfig {
            outcome_shift_per_arm: 0,
            ..small_cfg()
        };
        let truth = gen_truth(&cfg, &mut rng_from(4)).unwrap();
        assert_eq!(truth.beta_o, truth.beta_r);
    }

    #[test]
    fn misspecified_truth_has_quad_terms_on_every_nonzero() {
        let cfg = SimConfig {
            misspecified: true,
            ..small_cfg()
        };
        let truth = gen_truth(&cfg, &mut rng_from(5)).unwrap();
        for arm in [-1i8, 1] {
            let nz = truth.beta_r.get(arm).iter().filter(|v| **v != 0.0).count();
            assert_eq!(truth.quad_r.get(arm).len(), nz);
            assert!(truth.quad_r.get(arm).iter().all(|(_, m)| (0.25..=0.5).contains(m)));
        }
    }

    #[test]
    fn os_treated_fraction_reaches_target() {
        let cfg = SimConfig::default();
        let mut rng = rng_from(6);
        let truth = gen_truth(&cfg, &mut rng).unwrap();
        let os = gen_os(&cfg, &truth, &mut rng).unwrap();
        assert_eq!(os.n(), 10_000);
        assert!(os.treated_fraction() >= 1.0 / 3.0 - 0.02, "{}", os.treated_fraction());
    }

    #[test]
    fn noiseless_os_outcome_is_exactly_linear() {
        let cfg = SimConfig {
            noise_sd: 0.0,
            ..small_cfg()
        };
        let mut rng = rng_from(7);
        let truth = gen_truth(&cfg, &mut rng).unwrap();
        let os = gen_os(&cfg, &truth, &mut rng).unwrap();
        for i in 0..os.n() {
            let beta = truth.beta_o.get(os.a()[i]);
            let lin: f64 = beta.iter().zip(os.x().row(i)).map(|(b, v)| b * v).sum();
            assert_eq!(os.y()[i], lin);
        }
    }

    #[test]
    fn os_least_squares_recovers_arm_coefficients() {
        let cfg = SimConfig {
            n_o: 100_000,
            ..Default::default()
        };
        let mut rng = rng_from(8);
        let truth = gen_truth(&cfg, &mut rng).unwrap();
        let os = gen_os(&cfg, &truth, &mut rng).unwrap();
        for arm in [-1i8, 1] {
            let rows = os.arm_rows(arm);
            let x = os.x().select(Axis(0), &rows);
            let y = os.y().select(Axis(0), &rows);
            let xm = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]]);
            let ym = nalgebra::DVector::from_iterator(y.len(), y.iter().copied());
            let xtx = xm.transpose() * &xm;
            let xty = xm.transpose() * ym;
            let coef = xtx.cholesky().unwrap().solve(&xty);
            let rms = (coef
                .iter()
                .zip(truth.beta_o.get(arm))
                .map(|(c, b)| (c - b).powi(2))
                .sum::<f64>()
                / cfg.p as f64)
                .sqrt();
            assert!(rms < 0.03, "arm {arm} rms {rms}");
        }
    }

    #[test]
    fn rct_assignment_and_covariate_shift() {
        let cfg = SimConfig {
            n_r: 4000,
            ..Default::default()
        };
        let mut rng = rng_from(9);
        let truth = gen_truth(&cfg, &mut rng).unwrap();
        let rct = gen_rct(&cfg, &truth, &mut rng).unwrap();
        let f = rct.treated_fraction();
        assert!((f - 0.5).abs() <= 3.0 / (cfg.n_r as f64).sqrt());
        let nz = truth.rct_mean_shift.iter().filter(|v| **v != 0.0).count();
        assert_eq!(nz, 10);
    }

    #[test]
    fn outcome_mean_decomposition_at_half() {
        let cfg = SimConfig {
            noise_sd: 0.0,
            ..small_cfg()
        };
        let mut rng = rng_from(10);
        let truth = gen_truth(&cfg, &mut rng).unwrap();
        let rct = gen_rct(&cfg, &truth, &mut rng).unwrap();
        for i in 0..rct.n() {
            let xs = rct.x();
            let x = xs.row(i);
            let a = f64::from(rct.a()[i]);
            let rhs = truth.rct_cface(x) + 0.5 * a * true_cate(&truth, x);
            assert_abs_diff_eq!(rct.y()[i], rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn true_cate_examples() {
        let mut truth = gen_truth(&small_cfg(), &mut rng_from(11)).unwrap();
        truth.p = 2;
        truth.beta_r = ArmPair::new(vec![0.0, 1.0], vec![1.0, 0.0]);
        truth.quad_r = Default::default();
        assert_eq!(true_cate(&truth, array![2.0, 3.0].view()), -1.0);

        truth.beta_r = ArmPair::new(vec![0.3, -0.2], vec![0.3, -0.2]);
        for x in [array![1.0, 5.0], array![-3.0, 0.1]] {
            assert_eq!(true_cate(&truth, x.view()), 0.0);
        }

        truth.quad_r = ArmPair::new(vec![(0, 0.25)], vec![(0, 0.5), (1, 0.3)]);
        let x = array![2.0, 3.0];
        let expect = (0.5 - 0.25) * 4.0 + 0.3 * 9.0;
        assert_abs_diff_eq!(true_cate(&truth, x.view()), expect, epsilon = 1e-12);
    }

    #[test]
    fn linear_truth_cate_is_coefficient_contrast() {
        let truth = gen_truth(&small_cfg(), &mut rng_from(12)).unwrap();
        let x = sample_rct_covariates(50, &truth, &mut rng_from(13)).unwrap();
        for row in x.axis_iter(Axis(0)) {
            let lin: f64 = (0..truth.p)
                .map(|j| (truth.beta_r.plus[j] - truth.beta_r.minus[j]) * row[j])
                .sum();
            assert_abs_diff_eq!(true_cate(&truth, row), lin, epsilon = 1e-12);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = small_cfg();
        let run = |seed| {
            let mut rng = rng_from(seed);
            let truth = gen_truth(&cfg, &mut rng).unwrap();
            let os = gen_os(&cfg, &truth, &mut rng).unwrap();
            let rct = gen_rct(&cfg, &truth, &mut rng).unwrap();
            (truth, os, rct)
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5).2, run(6).2);
    }

    #[test]
    fn dropping_modifiers() {
        let cfg = small_cfg();
        let mut rng = rng_from(14);
        let mut truth = gen_truth(&cfg, &mut rng).unwrap();
        let os = gen_os(&cfg, &truth, &mut rng).unwrap();
        let rct = gen_rct(&cfg, &truth, &mut rng).unwrap();

        let (o0, r0, removed) = drop_modifiers(&os, &rct, &mut truth, 0.0, &mut rng).unwrap();
        assert!(removed.is_empty());
        assert_eq!((o0, r0), (os.clone(), rct.clone()));

        let n_mod = truth.effect_modifiers().len();
        let (o, r, removed) = drop_modifiers(&os, &rct, &mut truth, 0.5, &mut rng).unwrap();
        assert_eq!(removed.len(), (n_mod as f64 * 0.5).ceil() as usize);
        assert_eq!(o.feature_names(), r.feature_names());
        assert_eq!(o.p(), cfg.p - removed.len());
        assert_eq!(truth.removed_indices, removed);
        for j in &removed {
            assert!(!o.feature_names().contains(&format!("x{}", j + 1)));
        }
        assert!(drop_modifiers(&os, &rct, &mut truth, 0.6, &mut rng).is_err());
    }

    #[test]
    fn fifteen_modifiers_at_half_removes_eight() {
        let mut truth = gen_truth(&small_cfg(), &mut rng_from(15)).unwrap();
        let p = truth.p;
        truth.beta_o = ArmPair::new(vec![0.0; p], vec![0.0; p]);
        truth.beta_r = ArmPair::new(vec![0.0; p], vec![0.0; p]);
        for j in 0..15 {
            truth.beta_r.plus[j] = 1.0;
        }
        assert_eq!(truth.effect_modifiers().len(), 15);
        let x = Array2::zeros((4, p));
        let ds = |s| StudyDataset::with_default_names(s, x.clone(), vec![1, -1, 1, -1], Array1::zeros(4)).unwrap();
        let (_, _, removed) = drop_modifiers(&ds(Study::Os), &ds(Study::Rct), &mut truth, 0.5, &mut rng_from(1)).unwrap();
        assert_eq!(removed.len(), 8);
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig { support_size: 200, ..Default::default() }.validate().is_err());
        assert!(SimConfig { removed_modifier_fraction: 0.6, ..Default::default() }.validate().is_err());
        assert!(SimConfig { n_r: 0, ..Default::default() }.validate().is_err());
        assert!(SimConfig { rct_pi_plus: 1.0, ..Default::default() }.validate().is_err());
        assert!(SimConfig::default().validate().is_ok());
    }

    #[test]
    fn intercept_bisection_hits_target() {
        let scores: Vec<f64> = (0..1000).map(|i| (i as f64 / 100.0).sin() * 2.0).collect();
        let b = tune_intercept(&scores, 1.0 / 3.0);
        let frac = scores.iter().map(|s| logistic(b + s)).sum::<f64>() / 1000.0;
        assert!(frac >= 1.0 / 3.0 && frac < 1.0 / 3.0 + 1e-9);
    }
}
