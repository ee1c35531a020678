use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use catefuse_core::data::{read_csv, write_csv, Study, StudyDataset};
use catefuse_core::estimators::{fit_method, fit_os_models, ArmModels, CateModel, EstimatorConfig};
use catefuse_core::eval::{emit_report, render_markdown, run_experiment, ExperimentReport, ExperimentSpec, ReportFormat};
use catefuse_core::seed::rng_from;
use catefuse_core::sim::{drop_modifiers, gen_os, gen_rct, gen_truth, SimConfig};

use crate::args::{ExperimentArgs, FitArgs, ReportArgs, SimulateArgs};
use crate::CliError;

pub const SEED_ENV: &str = "CATEFUSE_SEED";

/// Explicit flag, then the config file, then the environment, then 0.
fn resolve_seed(flag: Option<u64>, from_config: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag.or(from_config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got '{v}'"))),
        Err(_) => Ok(0),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{what} '{}' does not exist", path.display())));
    }
    Ok(())
}

/// Parse a JSON config, reporting the offending field on failure. Returns the
/// value and whether `seed_key` was present.
fn load_config<T: DeserializeOwned>(path: &Path, seed_key: &str) -> Result<(T, Option<u64>), CliError> {
    require_file(path, "config file")?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let value: T = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        CliError::Usage(format!("{}: field '{field}': {}", path.display(), e.inner()))
    })?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    let seed = raw.get(seed_key).and_then(|v| v.as_u64());
    Ok((value, seed))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(catefuse_core::Error::from)?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(catefuse_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

pub fn simulate(args: &SimulateArgs, verbose: bool) -> Result<(), CliError> {
    let (mut cfg, cfg_seed) = match &args.config {
        Some(p) => load_config::<SimConfig>(p, "seed")?,
        None => (SimConfig::default(), None),
    };
    if let Some(v) = args.p {
        cfg.p = v;
    }
    if let Some(v) = args.n_r {
        cfg.n_r = v;
    }
    if let Some(v) = args.n_o {
        cfg.n_o = v;
    }
    if let Some(v) = args.noise_sd {
        cfg.noise_sd = v;
    }
    if args.misspecified {
        cfg.misspecified = true;
    }
    if let Some(v) = args.removal_fraction {
        cfg.removed_modifier_fraction = v;
    }
    cfg.seed = resolve_seed(args.seed, cfg_seed)?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    create_dir(&args.out)?;
    let mut rng = rng_from(cfg.seed);
    let mut truth = gen_truth(&cfg, &mut rng)?;
    let os = gen_os(&cfg, &truth, &mut rng)?;
    let rct = gen_rct(&cfg, &truth, &mut rng)?;
    let (os, rct, removed) = drop_modifiers(&os, &rct, &mut truth, cfg.removed_modifier_fraction, &mut rng)?;
    write_csv(&rct, args.out.join("rct.csv"))?;
    write_csv(&os, args.out.join("os.csv"))?;
    write_json(&args.out.join("truth.json"), &truth)?;
    write_json(&args.out.join("config.json"), &cfg)?;
    if verbose {
        eprintln!(
            "wrote {} trial and {} observational rows ({} covariates, {} removed) to {}",
            rct.n(),
            os.n(),
            rct.p(),
            removed.len(),
            args.out.display()
        );
    }
    Ok(())
}

/// Model file written by `fit`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(flatten)]
    pub model: CateModel,
    pub feature_names: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub os_models: Option<ArmModels>,
}

fn load_study(path: &Path, expected: Study) -> Result<StudyDataset, CliError> {
    let ds = read_csv(path)?;
    if ds.study() != expected {
        return Err(CliError::Core(catefuse_core::Error::InvalidInput(format!(
            "{} holds study '{}', expected '{}'",
            path.display(),
            ds.study(),
            expected
        ))));
    }
    Ok(ds)
}

pub fn fit(args: &FitArgs, verbose: bool) -> Result<(), CliError> {
    require_file(&args.rct, "trial CSV")?;
    let os_path = match (&args.os, args.method.uses_os()) {
        (Some(p), _) => {
            require_file(p, "observational CSV")?;
            Some(p.clone())
        }
        (None, true) => return Err(CliError::Usage(format!("--os is required for method '{}'", args.method))),
        (None, false) => None,
    };
    let mut cfg = match &args.config {
        Some(p) => load_config::<EstimatorConfig>(p, "seed")?.0,
        None => EstimatorConfig::default(),
    };
    if let Some(k) = args.k {
        cfg.cross_fit_folds = k;
    }
    if let Some(pi) = args.pi_plus {
        cfg.pi_plus1 = Some(pi);
    }
    let seed = resolve_seed(args.seed, None)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }

    let rct = load_study(&args.rct, Study::Rct)?;
    let os_models = match (&os_path, args.method.uses_os()) {
        (Some(p), true) => {
            let os = load_study(p, Study::Os)?;
            os.check_aligned(&rct)?;
            if verbose {
                eprintln!("fitting observational arm models on {} rows", os.n());
            }
            Some(fit_os_models(&os, &cfg, seed)?)
        }
        _ => None,
    };
    let model = fit_method(args.method, &rct, os_models.as_ref(), &cfg, seed)?;
    let file = ModelFile {
        model,
        feature_names: rct.feature_names().to_vec(),
        os_models,
    };
    write_json(&args.out, &file)?;
    if verbose {
        eprintln!("wrote {} model to {}", args.method, args.out.display());
    }
    Ok(())
}

fn write_all_formats(report: &ExperimentReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for &f in formats {
        files.extend(emit_report(report, f, dir)?);
    }
    Ok(files)
}

const ALL_FORMATS: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::PlotData];

pub fn experiment(args: &ExperimentArgs, verbose: bool) -> Result<(), CliError> {
    let (mut spec, spec_seed) = load_config::<ExperimentSpec>(&args.spec, "base_seed")?;
    if let Some(r) = args.replicates {
        spec.replicates = r;
    }
    spec.base_seed = resolve_seed(args.seed, spec_seed)?;
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    create_dir(&args.out)?;
    if verbose {
        eprintln!(
            "running {} cells x {} replicates x {} methods",
            spec.cells().len(),
            spec.replicates,
            spec.methods.len()
        );
    }
    let report = run_experiment(&spec, args.jobs)?;
    write_json(&args.out.join("report.json"), &report)?;
    let files = write_all_formats(&report, &args.out, &ALL_FORMATS)?;
    print!("{}", render_markdown(&report));
    if verbose {
        for f in files {
            eprintln!("wrote {}", f.display());
        }
    }
    Ok(())
}

pub fn report(args: &ReportArgs, verbose: bool) -> Result<(), CliError> {
    require_file(&args.input, "report")?;
    let formats = if args.format.is_empty() {
        ALL_FORMATS.to_vec()
    } else {
        args.format
            .iter()
            .map(|f| f.parse::<ReportFormat>().map_err(|e| CliError::Usage(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?
    };
    let text = fs::read_to_string(&args.input).map_err(|e| io_error(&args.input, e))?;
    let report: ExperimentReport = serde_json::from_str(&text).map_err(catefuse_core::Error::from)?;
    create_dir(&args.out)?;
    for f in write_all_formats(&report, &args.out, &formats)? {
        if verbose {
            eprintln!("wrote {}", f.display());
        }
    }
    Ok(())
}
