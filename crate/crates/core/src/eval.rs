//! Replicated simulation experiments and their reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{fit_method, fit_os_models, CateModel, EstimatorConfig, Method};
use crate::seed::{derive_seed, rng_from};
use crate::sim::{drop_modifiers, gen_os, gen_rct, gen_truth, sample_rct_covariates, true_cate, GroundTruth, SimConfig};

/// Root-mean-square difference between the fitted and true CATE on `eval_x`.
///
/// `eval_x` holds every covariate of the ground truth. When the truth records
/// removed columns the model is evaluated on the observed ones only.
pub fn rmse_cate(model: &CateModel, truth: &GroundTruth, eval_x: ArrayView2<f64>) -> Result<f64> {
    if eval_x.ncols() != truth.p {
        return Err(Error::Dimension(format!(
            "evaluation matrix has {} columns, truth has {}",
            eval_x.ncols(),
            truth.p
        )));
    }
    if eval_x.nrows() == 0 {
        return Err(Error::InvalidInput("no evaluation points".into()));
    }
    let observed = truth.observed_columns();
    if model.tau_coef.p() != observed.len() {
        return Err(Error::Dimension(format!(
            "model has {} coefficients, {} observed columns",
            model.tau_coef.p(),
            observed.len()
        )));
    }
    let seen = eval_x.select(Axis(1), &observed);
    let pred = model.predict_all(seen.view());
    let se: f64 = eval_x
        .axis_iter(Axis(0))
        .zip(&pred)
        .map(|(row, p)| (p - true_cate(truth, row)).powi(2))
        .sum();
    Ok((se / eval_x.nrows() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    /// Base simulation settings; the grid below overrides n_r, the
    /// misspecification flag and the removal fraction.
    pub sim: SimConfig,
    pub n_r: Vec<usize>,
    pub misspecified: Vec<bool>,
    pub removal_fractions: Vec<f64>,
    pub methods: Vec<Method>,
    pub replicates: usize,
    pub eval_points: usize,
    pub base_seed: u64,
    pub estimator: EstimatorConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            sim: SimConfig::default(),
            n_r: vec![250],
            misspecified: vec![false],
            removal_fractions: vec![0.0],
            methods: Method::ALL.to_vec(),
            replicates: 30,
            eval_points: 2000,
            base_seed: 0,
            estimator: EstimatorConfig::default(),
        }
    }
}

/// One point of the experiment grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub n_r: usize,
    pub misspecified: bool,
    pub removed_fraction: f64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.replicates == 0 {
            return bad("replicates must be >= 1");
        }
        if self.eval_points == 0 {
            return bad("eval_points must be >= 1");
        }
        if self.n_r.is_empty() || self.misspecified.is_empty() || self.removal_fractions.is_empty() {
            return bad("every grid dimension needs at least one value");
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty");
        }
        for cell in self.cells() {
            self.cell_config(&cell).validate()?;
            if !(0.0..=0.5).contains(&cell.removed_fraction) {
                return bad(&format!("removal fraction {} outside [0, 0.5]", cell.removed_fraction));
            }
        }
        Ok(())
    }

    /// Grid cells in row-major order: n_r, then misspecification, then removal.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &n_r in &self.n_r {
            for &misspecified in &self.misspecified {
                for &removed_fraction in &self.removal_fractions {
                    out.push(Cell {
                        n_r,
                        misspecified,
                        removed_fraction,
                    });
                }
            }
        }
        out
    }

    pub fn cell_config(&self, cell: &Cell) -> SimConfig {
        SimConfig {
            n_r: cell.n_r,
            misspecified: cell.misspecified,
            removed_modifier_fraction: cell.removed_fraction,
            ..self.sim.clone()
        }
    }

    /// Caveats that apply to results produced from this spec.
    pub fn deviations(&self) -> Vec<String> {
        let mut out = vec![
            "RMSE is computed on fresh draws from the trial covariate distribution".to_string(),
        ];
        if self.misspecified.iter().any(|&m| m) {
            out.push(
                "misspecified cells compare linear LASSO estimators; random-forest baselines are not implemented, so comparisons there are qualitative"
                    .into(),
            );
        }
        if self.methods.contains(&Method::Crossfit) {
            out.push("cross-fitting averages the calibration contrast across rounds as well as the correction".into());
        }
        if self.replicates < 100 {
            out.push(format!("{} replicates per cell", self.replicates));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub n_r: usize,
    pub misspecified: bool,
    pub removed_fraction: f64,
    pub method: Method,
    pub rmse_mean: f64,
    pub rmse_sd: f64,
    /// Successful replicates.
    pub replicates: usize,
    pub failures: usize,
    /// False when more than 10% of the replicates failed.
    pub valid: bool,
    /// Total fitting time over replicates. Not part of the CSV output.
    #[serde(default)]
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_error: Option<String>,
}

impl ReportRow {
    pub fn cell(&self) -> Cell {
        Cell {
            n_r: self.n_r,
            misspecified: self.misspecified,
            removed_fraction: self.removed_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub name: String,
    pub version: String,
    pub base_seed: u64,
    pub replicates: usize,
    pub eval_points: usize,
    pub deviations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn row(&self, cell: &Cell, method: Method) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.cell() == *cell)
    }

    /// Mean RMSE of `method` in the first cell matching the given n_r,
    /// misspecification and removal fraction.
    pub fn mean(&self, n_r: usize, misspecified: bool, removed_fraction: f64, method: Method) -> Option<f64> {
        self.row(
            &Cell {
                n_r,
                misspecified,
                removed_fraction,
            },
            method,
        )
        .map(|r| r.rmse_mean)
    }
}

// seed path tags
const TAG_EVAL: u64 = 1;
const TAG_OS: u64 = 2;
const TAG_FIT: u64 = 3;

struct Replicate {
    /// Per method: RMSE or error message, plus fitting time.
    results: Vec<(std::result::Result<f64, String>, f64)>,
}

fn run_replicate(spec: &ExperimentSpec, cell: &Cell, seed: u64) -> Replicate {
    let fail_all = |e: Error| Replicate {
        results: spec.methods.iter().map(|_| (Err(e.to_string()), 0.0)).collect(),
    };
    let cfg = spec.cell_config(cell);
    let mut rng = rng_from(seed);
    let data = (|| -> Result<_> {
        let mut truth = gen_truth(&cfg, &mut rng)?;
        let os = gen_os(&cfg, &truth, &mut rng)?;
        let rct = gen_rct(&cfg, &truth, &mut rng)?;
        let (os, rct, _) = drop_modifiers(&os, &rct, &mut truth, cell.removed_fraction, &mut rng)?;
        let eval_x = sample_rct_covariates(spec.eval_points, &truth, &mut rng_from(derive_seed(seed, &[TAG_EVAL])))?;
        Ok((truth, os, rct, eval_x))
    })();
    let (truth, os, rct, eval_x) = match data {
        Ok(d) => d,
        Err(e) => return fail_all(e),
    };

    let t0 = Instant::now();
    let os_models = if spec.methods.iter().any(|m| m.uses_os()) {
        Some(fit_os_models(&os, &spec.estimator, derive_seed(seed, &[TAG_OS])).map_err(|e| e.to_string()))
    } else {
        None
    };
    let os_time = t0.elapsed().as_secs_f64();

    let fit_seed = derive_seed(seed, &[TAG_FIT]);
    let results = spec
        .methods
        .iter()
        .map(|&method| {
            let t = Instant::now();
            let models = match (&os_models, method.uses_os()) {
                (Some(Err(e)), true) => return (Err(e.clone()), os_time),
                (Some(Ok(m)), true) => Some(m),
                _ => None,
            };
            let out = fit_method(method, &rct, models, &spec.estimator, fit_seed)
                .and_then(|model| rmse_cate(&model, &truth, eval_x.view()))
                .map_err(|e| e.to_string());
            let shared = if method.uses_os() { os_time } else { 0.0 };
            (out, t.elapsed().as_secs_f64() + shared)
        })
        .collect();
    Replicate { results }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Run every (cell, replicate) pair, `jobs` at a time (0 = all cores).
/// Replicate r of cell c uses seed `derive_seed(base_seed, [c, r])`, so the
/// report does not depend on `jobs`.
pub fn run_experiment(spec: &ExperimentSpec, jobs: usize) -> Result<ExperimentReport> {
    spec.validate()?;
    let cells = spec.cells();
    let tasks: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..spec.replicates).map(move |r| (c, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let outcomes: Vec<Replicate> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(c, r)| run_replicate(spec, &cells[c], derive_seed(spec.base_seed, &[c as u64, r as u64])))
            .collect()
    });

    let mut rows = Vec::with_capacity(cells.len() * spec.methods.len());
    for (c, cell) in cells.iter().enumerate() {
        let reps = &outcomes[c * spec.replicates..(c + 1) * spec.replicates];
        for (k, &method) in spec.methods.iter().enumerate() {
            let mut ok = Vec::new();
            let mut first_error = None;
            let mut wall = 0.0;
            for rep in reps {
                let (res, secs) = &rep.results[k];
                wall += secs;
                match res {
                    Ok(v) => ok.push(*v),
                    Err(e) => {
                        first_error.get_or_insert_with(|| e.clone());
                    }
                }
            }
            let failures = spec.replicates - ok.len();
            let (rmse_mean, rmse_sd) = mean_sd(&ok);
            rows.push(ReportRow {
                n_r: cell.n_r,
                misspecified: cell.misspecified,
                removed_fraction: cell.removed_fraction,
                method,
                rmse_mean,
                rmse_sd,
                replicates: ok.len(),
                failures,
                valid: failures * 10 <= spec.replicates,
                wall_seconds: wall,
                first_error,
            });
        }
    }
    Ok(ExperimentReport {
        metadata: ReportMetadata {
            name: spec.name.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            base_seed: spec.base_seed,
            replicates: spec.replicates,
            eval_points: spec.eval_points,
            deviations: spec.deviations(),
        },
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    PlotData,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "markdown-table" | "md" => Ok(ReportFormat::Markdown),
            "plotdata" => Ok(ReportFormat::PlotData),
            other => Err(Error::InvalidInput(format!("unknown report format '{other}'"))),
        }
    }
}

const CSV_HEADER: [&str; 9] = [
    "n_r",
    "misspecified",
    "removed_fraction",
    "method",
    "rmse_mean",
    "rmse_sd",
    "replicates",
    "failures",
    "valid",
];

/// Long-format CSV, one line per (cell, method). Floats are written in
/// shortest round-trip form.
pub fn render_csv(report: &ExperimentReport) -> String {
    let mut out = CSV_HEADER.join(",");
    out.push('\n');
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{:?},{},{:?},{:?},{},{},{}",
            r.n_r, r.misspecified, r.removed_fraction, r.method, r.rmse_mean, r.rmse_sd, r.replicates, r.failures, r.valid
        );
    }
    out
}

/// Parse the output of [`render_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::InvalidInput(format!("unexpected report header {headers:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| -> Result<&str> { Ok(&rec[k]) };
        let bad = |k: usize| Error::InvalidInput(format!("row {}: bad value in column {}", i + 2, CSV_HEADER[k]));
        let num = |k: usize| -> Result<f64> { field(k)?.parse::<f64>().map_err(|_| bad(k)) };
        let int = |k: usize| -> Result<usize> { field(k)?.parse::<usize>().map_err(|_| bad(k)) };
        let flag = |k: usize| -> Result<bool> { field(k)?.parse::<bool>().map_err(|_| bad(k)) };
        rows.push(ReportRow {
            n_r: int(0)?,
            misspecified: flag(1)?,
            removed_fraction: num(2)?,
            method: field(3)?.parse()?,
            rmse_mean: num(4)?,
            rmse_sd: num(5)?,
            replicates: int(6)?,
            failures: int(7)?,
            valid: flag(8)?,
            wall_seconds: 0.0,
            first_error: None,
        });
    }
    Ok(rows)
}

fn cell_label(cell: &Cell, varying: &Varying) -> String {
    let mut parts = Vec::new();
    if varying.n_r || (!varying.misspecified && !varying.removal) {
        parts.push(format!("n_r = {}", cell.n_r));
    }
    if varying.misspecified {
        parts.push(if cell.misspecified { "misspecified" } else { "linear" }.to_string());
    }
    if varying.removal {
        parts.push(format!("removed {:.0}%", cell.removed_fraction * 100.0));
    }
    parts.join(", ")
}

struct Varying {
    n_r: bool,
    misspecified: bool,
    removal: bool,
}

fn distinct_cells(report: &ExperimentReport) -> Vec<Cell> {
    let mut cells: Vec<Cell> = Vec::new();
    for r in &report.rows {
        if !cells.contains(&r.cell()) {
            cells.push(r.cell());
        }
    }
    cells
}

fn distinct_methods(report: &ExperimentReport) -> Vec<Method> {
    let mut methods: Vec<Method> = Vec::new();
    for r in &report.rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods
}

fn varying(cells: &[Cell]) -> Varying {
    let differs = |f: &dyn Fn(&Cell) -> String| cells.iter().any(|c| f(c) != f(&cells[0]));
    if cells.is_empty() {
        return Varying {
            n_r: false,
            misspecified: false,
            removal: false,
        };
    }
    Varying {
        n_r: differs(&|c| c.n_r.to_string()),
        misspecified: differs(&|c| c.misspecified.to_string()),
        removal: differs(&|c| format!("{:?}", c.removed_fraction)),
    }
}

/// Methods as rows, grid cells as columns, entries `mean ± sd`.
pub fn render_markdown(report: &ExperimentReport) -> String {
    let cells = distinct_cells(report);
    let methods = distinct_methods(report);
    let vary = varying(&cells);
    let mut out = format!("### RMSE of CATE estimation: {}\n\n", report.metadata.name);
    out.push_str("| Method |");
    for c in &cells {
        let _ = write!(out, " {} |", cell_label(c, &vary));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(cells.len()));
    out.push('\n');
    for m in &methods {
        let _ = write!(out, "| {} |", m.label());
        for c in &cells {
            match report.row(c, *m) {
                Some(r) if r.valid => {
                    let _ = write!(out, " {:.2} ± {:.2} |", r.rmse_mean, r.rmse_sd);
                }
                Some(r) => {
                    let _ = write!(out, " {:.2} ± {:.2} (invalid: {} failures) |", r.rmse_mean, r.rmse_sd, r.failures);
                }
                None => out.push_str(" n/a |"),
            }
        }
        out.push('\n');
    }
    let _ = write!(
        out,
        "\n{} replicates per cell, base seed {}.\n",
        report.metadata.replicates, report.metadata.base_seed
    );
    for d in &report.metadata.deviations {
        let _ = writeln!(out, "- {d}");
    }
    out
}

/// Series for plotting: x is the first varying grid dimension among n_r and
/// removal fraction (n_r when nothing varies); one file per combination of
/// the remaining dimensions. Columns: method, x, mean, sd, lower, upper.
pub fn plot_series(report: &ExperimentReport) -> Vec<(String, String)> {
    let cells = distinct_cells(report);
    let vary = varying(&cells);
    let x_is_removal = vary.removal && !vary.n_r;
    let x_name = if x_is_removal { "removed_fraction" } else { "n_r" };
    let x_of = |r: &ReportRow| if x_is_removal { r.removed_fraction } else { r.n_r as f64 };
    let group_of = |r: &ReportRow| -> String {
        let mut key = String::new();
        if vary.misspecified {
            key.push_str(if r.misspecified { "_misspecified" } else { "_linear" });
        }
        if !x_is_removal && vary.removal {
            let _ = write!(key, "_removed{:.0}", r.removed_fraction * 100.0);
        }
        key
    };
    let mut groups: Vec<String> = Vec::new();
    for r in &report.rows {
        let g = group_of(r);
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    if groups.is_empty() {
        groups.push(String::new());
    }
    groups
        .into_iter()
        .map(|g| {
            let mut text = format!("method,{x_name},mean,sd,lower,upper\n");
            for r in report.rows.iter().filter(|r| group_of(r) == g) {
                let _ = writeln!(
                    text,
                    "{},{:?},{:?},{:?},{:?},{:?}",
                    r.method,
                    x_of(r),
                    r.rmse_mean,
                    r.rmse_sd,
                    r.rmse_mean - r.rmse_sd,
                    r.rmse_mean + r.rmse_sd
                );
            }
            (format!("{}_plot_{x_name}{g}.csv", report.metadata.name), text)
        })
        .collect()
}

/// Write the report in `format` under `dir`; returns the files written.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = &report.metadata.name;
    let files = match format {
        ReportFormat::Csv => vec![(format!("{name}.csv"), render_csv(report))],
        ReportFormat::Markdown => vec![(format!("{name}.md"), render_markdown(report))],
        ReportFormat::PlotData => plot_series(report),
    };
    let mut written = Vec::new();
    for (file, text) in files {
        let path = dir.join(file);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
