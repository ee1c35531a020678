//! CATE estimators for a randomized trial, optionally borrowing the arm-wise
//! outcome models of an observational study.
//!
//! Every estimator is linear in the covariates and built from cross-validated
//! LASSO fits. The pseudo-outcome `A (Y − m(X)) / π_A` has conditional mean
//! τ(X) for any nuisance `m`; its variance is smallest when `m` is the
//! counterfactual-weighted mean `π₊ μ₋(x) + π₋ μ₊(x)` (the CFACE), which is
//! what the observational arm models are used to estimate.
//!
//! | method      | nuisance `m`                       | CATE fit                                  |
//! |-------------|------------------------------------|-------------------------------------------|
//! | `naive`     | none                               | contrast of per-arm trial fits            |
//! | `cface-rct` | CFACE from per-arm trial fits      | LASSO of pseudo-outcomes                  |
//! | `proposed`  | CFACE from observational fits      | per-arm sparse shifts δ̂ₐ (separable form) |
//! | `robust`    | calibrated observational CFACE     | LASSO correction on top of calibrated contrast |
//! | `crossfit`  | as `robust`, calibration and correction on disjoint folds, averaged | |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{split_folds, ArmPair, StudyDataset, ARMS};
use crate::error::{Error, Result};
use crate::lasso::{cv_lasso, DesignProblem, LassoOptions};
use crate::seed::derive_seed;

/// Coefficients plus intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub coef: Vec<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn zeros(p: usize) -> Self {
        Self {
            coef: vec![0.0; p],
            intercept: 0.0,
        }
    }

    pub fn p(&self) -> usize {
        self.coef.len()
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    pub fn predict_all(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.dot(&ArrayView1::from(&self.coef)) + self.intercept
    }

    pub fn add(&self, other: &LinearModel) -> LinearModel {
        self.combine(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &LinearModel) -> LinearModel {
        self.combine(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> LinearModel {
        LinearModel {
            coef: self.coef.iter().map(|v| v * c).collect(),
            intercept: self.intercept * c,
        }
    }

    fn combine(&self, other: &LinearModel, f: impl Fn(f64, f64) -> f64) -> LinearModel {
        debug_assert_eq!(self.p(), other.p());
        LinearModel {
            coef: self.coef.iter().zip(&other.coef).map(|(a, b)| f(*a, *b)).collect(),
            intercept: f(self.intercept, other.intercept),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Os,
    Rct,
    Calibrated,
}

/// Per-arm linear outcome models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmModels {
    pub models: ArmPair<LinearModel>,
    pub source: ModelSource,
    /// Additive calibration δ̃ₐ; present iff `source` is `Calibrated`, in which
    /// case `models = base + deltas`.
    pub deltas: Option<ArmPair<LinearModel>>,
    pub lambdas: ArmPair<f64>,
}

impl ArmModels {
    pub fn p(&self) -> usize {
        self.models.plus.p()
    }

    /// μ₊ − μ₋ as a linear model.
    pub fn contrast(&self) -> LinearModel {
        self.models.plus.sub(&self.models.minus)
    }

    /// Uncalibrated models (models − deltas).
    pub fn base(&self) -> ArmPair<LinearModel> {
        match &self.deltas {
            Some(d) => ArmPair::new(self.models.minus.sub(&d.minus), self.models.plus.sub(&d.plus)),
            None => self.models.clone(),
        }
    }
}

/// Counterfactual-weighted mean π₊ μ₋(x) + π₋ μ₊(x).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cface {
    pub pi_plus1: f64,
    pub models: ArmModels,
}

impl Cface {
    pub fn new(pi_plus1: f64, models: ArmModels) -> Result<Self> {
        check_pi(pi_plus1)?;
        Ok(Self { pi_plus1, models })
    }

    /// The CFACE is itself linear.
    pub fn as_linear(&self) -> LinearModel {
        let m = &self.models.models;
        m.minus.scale(self.pi_plus1).add(&m.plus.scale(1.0 - self.pi_plus1))
    }
}

pub fn cface_eval(c: &Cface, x: ArrayView1<f64>) -> f64 {
    let m = &c.models.models;
    c.pi_plus1 * m.minus.predict(x) + (1.0 - c.pi_plus1) * m.plus.predict(x)
}

/// `a (y − m_x) / pi_a`.
pub fn pseudo_outcome(y: f64, a: i8, m_x: f64, pi_a: f64) -> Result<f64> {
    if !(pi_a > 0.0 && pi_a < 1.0) {
        return Err(Error::Positivity(pi_a));
    }
    Ok(f64::from(a) * (y - m_x) / pi_a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Naive,
    CfaceRct,
    Proposed,
    Robust,
    Crossfit,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Naive,
        Method::CfaceRct,
        Method::Proposed,
        Method::Robust,
        Method::Crossfit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::CfaceRct => "cface-rct",
            Method::Proposed => "proposed",
            Method::Robust => "robust",
            Method::Crossfit => "crossfit",
        }
    }

    /// Whether the method needs observational arm models.
    pub fn uses_os(self) -> bool {
        matches!(self, Method::Proposed | Method::Robust | Method::Crossfit)
    }

    /// Row label used in tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Naive => "RCT only (Naive)",
            Method::CfaceRct => "CFACE from RCT",
            Method::Proposed => "CFACE from OS (Proposed)",
            Method::Robust => "CFACE from OS (Proposed - Robust)",
            Method::Crossfit => "Proposed - Robust, Cross Fitted",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method '{s}'")))
    }
}

/// Decomposition `tau = os_contrast + calibration_contrast + correction`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CateParts {
    pub os_contrast: LinearModel,
    pub calibration_contrast: LinearModel,
    pub correction: LinearModel,
}

impl CateParts {
    pub fn reassemble(&self) -> LinearModel {
        self.os_contrast.add(&self.calibration_contrast).add(&self.correction)
    }
}

/// A fitted linear CATE model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CateModel {
    pub method: Method,
    pub tau_coef: LinearModel,
    pub parts: Option<CateParts>,
    /// Penalty selected by each cross-validated stage.
    pub lambdas: BTreeMap<String, f64>,
    pub pi_plus1: f64,
    pub seed: u64,
}

impl CateModel {
    pub fn predict(&self, x: ArrayView1<f64>) -> f64 {
        self.tau_coef.predict(x)
    }

    pub fn predict_all(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.tau_coef.predict_all(x)
    }

    fn from_parts(method: Method, parts: CateParts, lambdas: BTreeMap<String, f64>, pi_plus1: f64, seed: u64) -> Self {
        Self {
            method,
            tau_coef: parts.reassemble(),
            parts: Some(parts),
            lambdas,
            pi_plus1,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub lasso: LassoOptions,
    /// Trial P(A = +1). `None` uses the empirical treated fraction.
    pub pi_plus1: Option<f64>,
    pub cross_fit_folds: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            lasso: LassoOptions::default(),
            pi_plus1: None,
            cross_fit_folds: 5,
        }
    }
}

impl EstimatorConfig {
    pub fn resolve_pi(&self, rct: &StudyDataset) -> Result<f64> {
        let pi = self.pi_plus1.unwrap_or_else(|| rct.treated_fraction());
        check_pi(pi)?;
        Ok(pi)
    }
}

fn check_pi(pi: f64) -> Result<()> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::Positivity(pi));
    }
    Ok(())
}

/// π_a given π₊.
fn pi_of(pi_plus1: f64, a: i8) -> f64 {
    if a > 0 {
        pi_plus1
    } else {
        1.0 - pi_plus1
    }
}

fn arm_name(a: i8) -> &'static str {
    if a > 0 {
        "plus"
    } else {
        "minus"
    }
}

// stage tags for seed derivation
const STAGE_RCT_ARMS: u64 = 1;
const STAGE_PSEUDO: u64 = 2;
const STAGE_OS_ARMS: u64 = 3;
const STAGE_CALIBRATE: u64 = 4;
const STAGE_SHIFT: u64 = 5;
const STAGE_CORRECTION: u64 = 6;
const STAGE_FOLDS: u64 = 7;

fn arm_index(a: i8) -> u64 {
    u64::from(a > 0)
}

struct Fitted {
    model: LinearModel,
    lambda: f64,
}

/// Cross-validated LASSO of `y − offset` on `x`. The fold count shrinks to
/// keep at least two rows per fold, and a constant response yields the null
/// model (every penalty gives zero coefficients).
fn lasso_fit<'a>(
    x: ArrayView2<'a, f64>,
    y: ArrayView1<'a, f64>,
    offset: Option<ArrayView1<'a, f64>>,
    opts: &LassoOptions,
    seed: u64,
) -> Result<Fitted> {
    let n = x.nrows();
    let k = opts.k_folds.min(n / 2);
    if k < 2 {
        return Err(Error::InvalidInput(format!(
            "{n} rows are too few for cross-validation"
        )));
    }
    let mut prob = DesignProblem::new(x, y)?;
    if let Some(off) = offset {
        prob = prob.with_offset(off)?;
    }
    let opts = LassoOptions {
        k_folds: k,
        ..opts.clone()
    };
    match cv_lasso(&prob, &opts, seed) {
        Ok(fit) => Ok(Fitted {
            model: LinearModel {
                coef: fit.beta,
                intercept: fit.intercept,
            },
            lambda: fit.lambda_selected,
        }),
        Err(Error::DegenerateResponse) => {
            let mean = (0..n).map(|i| prob.target(i)).sum::<f64>() / n as f64;
            Ok(Fitted {
                model: LinearModel {
                    coef: vec![0.0; x.ncols()],
                    intercept: if opts.fit_intercept { mean } else { 0.0 },
                },
                lambda: 0.0,
            })
        }
        Err(e) => Err(e),
    }
}

struct ArmData {
    x: Array2<f64>,
    y: Array1<f64>,
}

fn arm_data(ds: &StudyDataset, a: i8, context: &str) -> Result<ArmData> {
    let rows = ds.arm_rows(a);
    if rows.is_empty() {
        return Err(Error::EmptyArm {
            arm: a,
            context: context.to_string(),
        });
    }
    Ok(ArmData {
        x: ds.x().select(Axis(0), &rows),
        y: ds.y().select(Axis(0), &rows),
    })
}

fn per_arm_fits(ds: &StudyDataset, cfg: &EstimatorConfig, seed: u64, stage: u64, source: ModelSource) -> Result<ArmModels> {
    let context = match source {
        ModelSource::Os => "observational study",
        _ => "trial",
    };
    let fits = ArmPair::new((), ()).try_map(|a, _| {
        let d = arm_data(ds, a, context)?;
        lasso_fit(d.x.view(), d.y.view(), None, &cfg.lasso, derive_seed(seed, &[stage, arm_index(a)]))
    })?;
    let lambdas = fits.map(|_, f| f.lambda);
    Ok(ArmModels {
        lambdas,
        models: ArmPair::new(fits.minus.model, fits.plus.model),
        source,
        deltas: None,
    })
}

fn check_os_models(rct: &StudyDataset, os_models: &ArmModels) -> Result<()> {
    if os_models.p() != rct.p() {
        return Err(Error::Dimension(format!(
            "observational models have {} coefficients, trial has {} covariates",
            os_models.p(),
            rct.p()
        )));
    }
    Ok(())
}

/// Contrast of per-arm trial LASSO fits.
pub fn fit_naive(rct: &StudyDataset, cfg: &EstimatorConfig, seed: u64) -> Result<CateModel> {
    let arms = per_arm_fits(rct, cfg, seed, STAGE_RCT_ARMS, ModelSource::Rct)?;
    let pi = cfg.resolve_pi(rct)?;
    let mut lambdas = BTreeMap::new();
    lambdas.insert("rct_minus".into(), arms.lambdas.minus);
    lambdas.insert("rct_plus".into(), arms.lambdas.plus);
    Ok(CateModel {
        method: Method::Naive,
        tau_coef: arms.contrast(),
        parts: None,
        lambdas,
        pi_plus1: pi,
        seed,
    })
}

/// Pseudo-outcome LASSO with an arbitrary nuisance `m(x_i)` supplied per row.
pub fn fit_pseudo_outcome(
    rct: &StudyDataset,
    m: ArrayView1<f64>,
    pi_plus1: f64,
    opts: &LassoOptions,
    seed: u64,
) -> Result<LinearModel> {
    check_pi(pi_plus1)?;
    if m.len() != rct.n() {
        return Err(Error::Dimension(format!("{} nuisance values for {} rows", m.len(), rct.n())));
    }
    let z = pseudo_outcomes(rct, m, pi_plus1)?;
    Ok(lasso_fit(rct.x(), z.view(), None, opts, seed)?.model)
}

fn pseudo_outcomes(rct: &StudyDataset, m: ArrayView1<f64>, pi_plus1: f64) -> Result<Array1<f64>> {
    let y = rct.y();
    rct.a()
        .iter()
        .enumerate()
        .map(|(i, &a)| pseudo_outcome(y[i], a, m[i], pi_of(pi_plus1, a)))
        .collect::<Result<Vec<_>>>()
        .map(Array1::from)
}

/// Pseudo-outcome regression with the CFACE estimated from the trial itself.
pub fn fit_cface_rct(rct: &StudyDataset, cfg: &EstimatorConfig, seed: u64) -> Result<CateModel> {
    let pi = cfg.resolve_pi(rct)?;
    let arms = per_arm_fits(rct, cfg, seed, STAGE_RCT_ARMS, ModelSource::Rct)?;
    let cface = Cface::new(pi, arms)?;
    let m = cface.as_linear().predict_all(rct.x());
    let z = pseudo_outcomes(rct, m.view(), pi)?;
    let fit = lasso_fit(rct.x(), z.view(), None, &cfg.lasso, derive_seed(seed, &[STAGE_PSEUDO]))?;
    let mut lambdas = BTreeMap::new();
    lambdas.insert("rct_minus".into(), cface.models.lambdas.minus);
    lambdas.insert("rct_plus".into(), cface.models.lambdas.plus);
    lambdas.insert("pseudo_outcome".into(), fit.lambda);
    Ok(CateModel {
        method: Method::CfaceRct,
        tau_coef: fit.model,
        parts: None,
        lambdas,
        pi_plus1: pi,
        seed,
    })
}

/// Per-arm LASSO on the observational study.
pub fn fit_os_models(os: &StudyDataset, cfg: &EstimatorConfig, seed: u64) -> Result<ArmModels> {
    per_arm_fits(os, cfg, seed, STAGE_OS_ARMS, ModelSource::Os)
}

/// Refit each observational arm model to the trial arm through a sparse
/// additive correction: LASSO of `Y − γ̂ᵒₐᵀX` on `X` over arm-a trial rows.
pub fn calibrate(rct: &StudyDataset, os_models: &ArmModels, cfg: &EstimatorConfig, seed: u64) -> Result<ArmModels> {
    if os_models.source != ModelSource::Os {
        return Err(Error::InvalidInput(format!(
            "calibration expects observational models, got {:?}",
            os_models.source
        )));
    }
    check_os_models(rct, os_models)?;
    let fits = os_models.models.try_map(|a, gamma| {
        let d = arm_data(rct, a, "trial")?;
        let offset = gamma.predict_all(d.x.view());
        lasso_fit(
            d.x.view(),
            d.y.view(),
            Some(offset.view()),
            &cfg.lasso,
            derive_seed(seed, &[STAGE_CALIBRATE, arm_index(a)]),
        )
    })?;
    let lambdas = fits.map(|_, f| f.lambda);
    let deltas = ArmPair::new(fits.minus.model, fits.plus.model);
    Ok(ArmModels {
        models: ArmPair::new(
            os_models.models.minus.add(&deltas.minus),
            os_models.models.plus.add(&deltas.plus),
        ),
        source: ModelSource::Calibrated,
        lambdas,
        deltas: Some(deltas),
    })
}

/// The arm-separable shift problem for arm `a`: response
/// `(a/πₐ) Yᵢ − c γ̂ᵒₐᵀXᵢ` on design `c Xᵢ` over arm-a rows, with
/// `c = a (1 + πₐ'/πₐ)` (a' the other arm). Returns δ̂ₐ in covariate units.
pub fn fit_arm_shift(
    rct: &StudyDataset,
    a: i8,
    gamma_os: &LinearModel,
    pi_plus1: f64,
    opts: &LassoOptions,
    seed: u64,
) -> Result<(LinearModel, f64)> {
    check_pi(pi_plus1)?;
    let d = arm_data(rct, a, "trial")?;
    let pi_a = pi_of(pi_plus1, a);
    let pi_other = pi_of(pi_plus1, -a);
    let af = f64::from(a);
    let c = af * (1.0 + pi_other / pi_a);
    let base = gamma_os.predict_all(d.x.view());
    let response = Array1::from_iter(d.y.iter().zip(&base).map(|(y, g)| af / pi_a * y - c * g));
    let design = d.x.mapv(|v| c * v);
    let fit = lasso_fit(design.view(), response.view(), None, opts, seed)?;
    // the fitted intercept is in response units; the design scaling puts it on δ's scale after dividing by c
    let delta = LinearModel {
        coef: fit.model.coef,
        intercept: fit.model.intercept / c,
    };
    Ok((delta, fit.lambda))
}

/// Observational CFACE without calibration; per-arm sparse shifts δ̂ₐ, CATE
/// `Σₐ a (γ̂ᵒₐ + δ̂ₐ)`.
pub fn fit_proposed(rct: &StudyDataset, os_models: &ArmModels, cfg: &EstimatorConfig, seed: u64) -> Result<CateModel> {
    check_os_models(rct, os_models)?;
    let pi = cfg.resolve_pi(rct)?;
    let base = os_models.base();
    let mut lambdas = BTreeMap::new();
    let mut shifts = Vec::with_capacity(2);
    for a in ARMS {
        let (delta, lambda) = fit_arm_shift(
            rct,
            a,
            base.get(a),
            pi,
            &cfg.lasso,
            derive_seed(seed, &[STAGE_SHIFT, arm_index(a)]),
        )?;
        lambdas.insert(format!("shift_{}", arm_name(a)), lambda);
        shifts.push(delta);
    }
    let (minus, plus) = (&shifts[0], &shifts[1]);
    let parts = CateParts {
        os_contrast: base.plus.sub(&base.minus),
        calibration_contrast: LinearModel::zeros(rct.p()),
        correction: plus.sub(minus),
    };
    Ok(CateModel::from_parts(Method::Proposed, parts, lambdas, pi, seed))
}

/// CATE correction δ̂ʳ given calibrated arm models: LASSO of the
/// pseudo-outcome with the calibrated CFACE as nuisance, offset by the
/// calibrated contrast.
pub fn fit_correction(
    rct: &StudyDataset,
    calibrated: &ArmModels,
    pi_plus1: f64,
    opts: &LassoOptions,
    seed: u64,
) -> Result<(LinearModel, f64)> {
    let cface = Cface::new(pi_plus1, calibrated.clone())?;
    let m = cface.as_linear().predict_all(rct.x());
    let z = pseudo_outcomes(rct, m.view(), pi_plus1)?;
    let prelim = calibrated.contrast().predict_all(rct.x());
    let fit = lasso_fit(rct.x(), z.view(), Some(prelim.view()), opts, seed)?;
    Ok((fit.model, fit.lambda))
}

/// Calibrate the observational models to the trial, then fit a sparse
/// correction of the calibrated contrast.
pub fn fit_proposed_robust(
    rct: &StudyDataset,
    os_models: &ArmModels,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<CateModel> {
    let pi = cfg.resolve_pi(rct)?;
    let cal = calibrate(rct, os_models, cfg, seed)?;
    let (correction, lambda) = fit_correction(rct, &cal, pi, &cfg.lasso, derive_seed(seed, &[STAGE_CORRECTION]))?;
    let deltas = cal.deltas.as_ref().expect("calibrated models carry deltas");
    let parts = CateParts {
        os_contrast: os_models.contrast(),
        calibration_contrast: deltas.plus.sub(&deltas.minus),
        correction,
    };
    let mut lambdas = BTreeMap::new();
    lambdas.insert("calibrate_minus".into(), cal.lambdas.minus);
    lambdas.insert("calibrate_plus".into(), cal.lambdas.plus);
    lambdas.insert("correction".into(), lambda);
    Ok(CateModel::from_parts(Method::Robust, parts, lambdas, pi, seed))
}

/// Cross-fitted robust estimator over stratified folds.
pub fn fit_cross_fitted(
    rct: &StudyDataset,
    os_models: &ArmModels,
    k: usize,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<CateModel> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("cross-fitting needs K >= 2, got {k}")));
    }
    let folds = split_folds(rct, k, derive_seed(seed, &[STAGE_FOLDS]))?;
    fit_cross_fitted_with_folds(rct, os_models, &folds, cfg, seed)
}

/// Round k calibrates on fold k and fits the correction on the other folds.
/// Both the correction δ̂ʳ and the calibration contrast are averaged over
/// rounds; every round reuses the same stage seeds.
pub fn fit_cross_fitted_with_folds(
    rct: &StudyDataset,
    os_models: &ArmModels,
    folds: &[Vec<usize>],
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<CateModel> {
    check_os_models(rct, os_models)?;
    let k = folds.len();
    if k < 2 {
        return Err(Error::InvalidInput(format!("cross-fitting needs K >= 2 folds, got {k}")));
    }
    let pi = cfg.resolve_pi(rct)?;
    let p = rct.p();
    let mut cal_sum = LinearModel::zeros(p);
    let mut corr_sum = LinearModel::zeros(p);
    let mut lambdas = BTreeMap::new();
    for (round, fold) in folds.iter().enumerate() {
        let calib_rows = rct.subset_rows(fold)?;
        let rest: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != round)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        let est_rows = rct.subset_rows(&rest)?;
        for a in ARMS {
            if calib_rows.arm_rows(a).len() < 2 {
                return Err(Error::ArmTooSmall {
                    arm: a,
                    count: calib_rows.arm_rows(a).len(),
                    folds: k,
                });
            }
        }
        let cal = calibrate(&calib_rows, os_models, cfg, seed)?;
        let (corr, lambda) = fit_correction(&est_rows, &cal, pi, &cfg.lasso, derive_seed(seed, &[STAGE_CORRECTION]))?;
        let deltas = cal.deltas.as_ref().expect("calibrated models carry deltas");
        cal_sum = cal_sum.add(&deltas.plus.sub(&deltas.minus));
        corr_sum = corr_sum.add(&corr);
        lambdas.insert(format!("round{round}_calibrate_minus"), cal.lambdas.minus);
        lambdas.insert(format!("round{round}_calibrate_plus"), cal.lambdas.plus);
        lambdas.insert(format!("round{round}_correction"), lambda);
    }
    let inv = 1.0 / k as f64;
    let parts = CateParts {
        os_contrast: os_models.contrast(),
        calibration_contrast: cal_sum.scale(inv),
        correction: corr_sum.scale(inv),
    };
    Ok(CateModel::from_parts(Method::Crossfit, parts, lambdas, pi, seed))
}

/// Dispatch by method. Methods that borrow from the observational study need
/// `os_models`.
pub fn fit_method(
    method: Method,
    rct: &StudyDataset,
    os_models: Option<&ArmModels>,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<CateModel> {
    let need_os = || {
        os_models.ok_or_else(|| Error::InvalidInput(format!("method '{method}' needs observational models")))
    };
    match method {
        Method::Naive => fit_naive(rct, cfg, seed),
        Method::CfaceRct => fit_cface_rct(rct, cfg, seed),
        Method::Proposed => fit_proposed(rct, need_os()?, cfg, seed),
        Method::Robust => fit_proposed_robust(rct, need_os()?, cfg, seed),
        Method::Crossfit => fit_cross_fitted(rct, need_os()?, cfg.cross_fit_folds, cfg, seed),
    }
}
