//! Study datasets, CSV ingestion/emission and treatment-stratified folds.
//!
//! CSV layout: a header row with `study`, `y`, `a` and then one column per
//! covariate (any names, kept in file order). Treatment is coded ±1
//! internally; a 0/1 column is accepted and 0 is mapped to −1.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Study {
    #[serde(rename = "r")]
    Rct,
    #[serde(rename = "o")]
    Os,
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Study::Rct => "r",
            Study::Os => "o",
        })
    }
}

impl FromStr for Study {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "r" => Ok(Study::Rct),
            "o" => Ok(Study::Os),
            other => Err(format!("study tag must be 'r' or 'o', got '{other}'")),
        }
    }
}

/// One study: covariates, ±1 treatment, outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyDataset {
    study: Study,
    x: Array2<f64>,
    a: Vec<i8>,
    y: Array1<f64>,
    feature_names: Vec<String>,
}

impl StudyDataset {
    pub fn new(
        study: Study,
        x: Array2<f64>,
        a: Vec<i8>,
        y: Array1<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let (n, p) = x.dim();
        if n == 0 {
            return Err(Error::InvalidInput("dataset must have at least one row".into()));
        }
        if feature_names.len() != p {
            return Err(Error::Dimension(format!(
                "{} feature names for {p} columns",
                feature_names.len()
            )));
        }
        if a.len() != n || y.len() != n {
            return Err(Error::Dimension(format!(
                "{n} rows but {} treatments and {} outcomes",
                a.len(),
                y.len()
            )));
        }
        if let Some(i) = a.iter().position(|v| *v != 1 && *v != -1) {
            return Err(Error::InvalidInput(format!(
                "treatment at row {i} is {}, expected -1 or +1",
                a[i]
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dataset contains non-finite values".into()));
        }
        Ok(Self {
            study,
            x,
            a,
            y,
            feature_names,
        })
    }

    /// Dataset with generated feature names `x1..xp`.
    pub fn with_default_names(study: Study, x: Array2<f64>, a: Vec<i8>, y: Array1<f64>) -> Result<Self> {
        let names = default_feature_names(x.ncols());
        Self::new(study, x, a, y, names)
    }

    pub fn study(&self) -> Study {
        self.study
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn a(&self) -> &[i8] {
        &self.a
    }

    pub fn y(&self) -> ArrayView1<'_, f64> {
        self.y.view()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Row indices receiving treatment `arm`.
    pub fn arm_rows(&self, arm: i8) -> Vec<usize> {
        self.a
            .iter()
            .enumerate()
            .filter_map(|(i, v)| (*v == arm).then_some(i))
            .collect()
    }

    pub fn treated_fraction(&self) -> f64 {
        self.a.iter().filter(|v| **v == 1).count() as f64 / self.n() as f64
    }

    pub fn subset_rows(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            self.study,
            self.x.select(Axis(0), rows),
            rows.iter().map(|&i| self.a[i]).collect(),
            self.y.select(Axis(0), rows),
            self.feature_names.clone(),
        )
    }

    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        Self::new(
            self.study,
            self.x.select(Axis(1), cols),
            self.a.clone(),
            self.y.clone(),
            cols.iter().map(|&j| self.feature_names[j].clone()).collect(),
        )
    }

    /// Both studies of one analysis must carry identical feature names in identical order.
    pub fn check_aligned(&self, other: &StudyDataset) -> Result<()> {
        if self.feature_names != other.feature_names {
            return Err(Error::Dimension(format!(
                "feature names differ between studies ({} vs {} columns)",
                self.p(),
                other.p()
            )));
        }
        Ok(())
    }
}

/// A value per treatment arm.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmPair<T> {
    pub minus: T,
    pub plus: T,
}

impl<T> ArmPair<T> {
    pub fn new(minus: T, plus: T) -> Self {
        Self { minus, plus }
    }

    /// Value for arm `a` (±1).
    pub fn get(&self, a: i8) -> &T {
        if a > 0 {
            &self.plus
        } else {
            &self.minus
        }
    }

    pub fn get_mut(&mut self, a: i8) -> &mut T {
        if a > 0 {
            &mut self.plus
        } else {
            &mut self.minus
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(i8, &T) -> U) -> ArmPair<U> {
        ArmPair {
            minus: f(-1, &self.minus),
            plus: f(1, &self.plus),
        }
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(i8, &T) -> std::result::Result<U, E>) -> std::result::Result<ArmPair<U>, E> {
        Ok(ArmPair {
            minus: f(-1, &self.minus)?,
            plus: f(1, &self.plus)?,
        })
    }
}

/// Both arms, −1 first.
pub const ARMS: [i8; 2] = [-1, 1];

pub fn default_feature_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

/// Treatment assignment mechanism of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropensitySpec {
    Constant { pi_plus1: f64 },
    Logistic { coef: Vec<f64>, intercept: f64 },
}

impl PropensitySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            PropensitySpec::Constant { pi_plus1 } => {
                if !(*pi_plus1 > 0.0 && *pi_plus1 < 1.0) {
                    return Err(Error::Positivity(*pi_plus1));
                }
            }
            PropensitySpec::Logistic { coef, intercept } => {
                if !intercept.is_finite() || coef.iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidInput("logistic propensity has non-finite coefficients".into()));
                }
            }
        }
        Ok(())
    }

    /// P(A = +1 | x).
    pub fn prob_plus(&self, x: ArrayView1<f64>) -> f64 {
        match self {
            PropensitySpec::Constant { pi_plus1 } => *pi_plus1,
            PropensitySpec::Logistic { coef, intercept } => {
                let eta = intercept + coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>();
                1.0 / (1.0 + (-eta).exp())
            }
        }
    }
}

/// How the treatment column was coded in the source file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentCoding {
    PlusMinusOne,
    /// 0 was mapped to −1.
    ZeroOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows: usize,
    pub coding: TreatmentCoding,
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<StudyDataset> {
    read_csv_with_report(path).map(|(ds, _)| ds)
}

pub fn read_csv_with_report(path: impl AsRef<Path>) -> Result<(StudyDataset, LoadReport)> {
    let path = path.as_ref();
    let parse_err = |row: usize, column: &str, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(1, "", e.to_string()))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(parse_err(1, "", "empty file".into()));
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| parse_err(1, name, format!("missing column '{name}'")))
    };
    let (ci_study, ci_y, ci_a) = (find("study")?, find("y")?, find("a")?);
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|c| ![ci_study, ci_y, ci_a].contains(c))
        .collect();
    let feature_names: Vec<String> = feature_cols.iter().map(|&c| headers[c].trim().to_string()).collect();
    let p = feature_cols.len();

    let mut study: Option<Study> = None;
    let mut flat = Vec::new();
    let mut raw_a = Vec::new();
    let mut ys = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, "", e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let tag: Study = rec[ci_study]
            .parse()
            .map_err(|m| parse_err(line, "study", m))?;
        match study {
            None => study = Some(tag),
            Some(s) if s != tag => {
                return Err(parse_err(line, "study", format!("mixed study tags '{s}' and '{tag}'")))
            }
            _ => {}
        }
        let num = |c: usize| -> Result<f64> {
            let cell = rec[c].trim();
            if cell.is_empty() {
                return Err(parse_err(line, &headers[c], "missing value".into()));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, &headers[c], format!("non-numeric cell '{cell}'")))?;
            if !v.is_finite() {
                return Err(parse_err(line, &headers[c], format!("non-finite cell '{cell}'")));
            }
            Ok(v)
        };
        ys.push(num(ci_y)?);
        let a = num(ci_a)?;
        if a != 1.0 && a != -1.0 && a != 0.0 {
            return Err(parse_err(line, "a", format!("treatment must be in {{-1, 1}} or {{0, 1}}, got {a}")));
        }
        raw_a.push((line, a));
        for &c in &feature_cols {
            flat.push(num(c)?);
        }
    }
    let n = ys.len();
    let Some(study) = study else {
        return Err(parse_err(2, "", "empty file: no data rows".into()));
    };
    if p == 0 {
        return Err(parse_err(1, "", "no covariate columns".into()));
    }

    let has_zero = raw_a.iter().any(|(_, v)| *v == 0.0);
    let has_neg = raw_a.iter().find(|(_, v)| *v == -1.0);
    let coding = match (has_zero, has_neg) {
        (true, Some((line, _))) => {
            return Err(parse_err(*line, "a", "treatment column mixes 0 and -1 codings".into()))
        }
        (true, None) => TreatmentCoding::ZeroOne,
        (false, _) => TreatmentCoding::PlusMinusOne,
    };
    let a: Vec<i8> = raw_a.iter().map(|(_, v)| if *v > 0.0 { 1 } else { -1 }).collect();
    let x = Array2::from_shape_vec((n, p), flat).expect("row-major buffer sized n*p");
    let ds = StudyDataset::new(study, x, a, Array1::from(ys), feature_names)?;
    Ok((ds, LoadReport { rows: n, coding }))
}

pub fn write_csv(ds: &StudyDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if ds.p() == 0 {
        return Err(Error::InvalidInput("cannot write a dataset without covariates".into()));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header = vec!["study".to_string(), "y".into(), "a".into()];
    header.extend(ds.feature_names.iter().cloned());
    w.write_record(&header)?;
    let tag = ds.study.to_string();
    let mut rec = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        rec.clear();
        rec.push(tag.clone());
        rec.push(format!("{:?}", ds.y[i]));
        rec.push(ds.a[i].to_string());
        rec.extend(ds.x.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Partition rows into `k` folds, stratified by treatment arm: every fold's
/// count of each arm differs from proportional by at most one.
pub fn split_folds(ds: &StudyDataset, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > ds.n() {
        return Err(Error::InvalidInput(format!("fold count must lie in [2, {}], got {k}", ds.n())));
    }
    let mut rng = rng_from(seed);
    let mut folds = vec![Vec::new(); k];
    let mut pos = 0;
    for arm in [-1i8, 1] {
        let mut rows = ds.arm_rows(arm);
        if rows.len() < k {
            return Err(Error::ArmTooSmall {
                arm,
                count: rows.len(),
                folds: k,
            });
        }
        rows.shuffle(&mut rng);
        for i in rows {
            folds[pos % k].push(i);
            pos += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}
