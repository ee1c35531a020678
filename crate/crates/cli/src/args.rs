use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use catefuse_core::estimators::Method;

#[derive(Debug, Parser)]
#[command(name = "catefuse", version, about = "CATE estimation combining a randomized trial with an observational study")]
pub struct Cli {
    /// Print errors as a JSON object on stderr.
    #[arg(long, global = true)]
    pub json_errors: bool,

    /// Progress messages on stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a trial and an observational dataset with known CATE.
    Simulate(SimulateArgs),
    /// Fit a CATE model to CSV data.
    Fit(FitArgs),
    /// Run a replicated simulation experiment.
    Experiment(ExperimentArgs),
    /// Render a stored experiment report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation settings as JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for rct.csv, os.csv and truth.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub n_r: Option<usize>,
    #[arg(long)]
    pub n_o: Option<usize>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    /// Add quadratic terms to the outcome models.
    #[arg(long)]
    pub misspecified: bool,
    /// Drop this fraction of the effect modifiers from both datasets.
    #[arg(long)]
    pub removal_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    #[arg(long)]
    pub rct: PathBuf,
    /// Required by proposed, robust and crossfit.
    #[arg(long)]
    pub os: Option<PathBuf>,
    /// Estimator settings as JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cross-fitting folds.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trial P(A = +1); defaults to the observed treated fraction.
    #[arg(long)]
    pub pi_plus: Option<f64>,
    /// Model JSON output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment specification JSON.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Base seed, overriding the spec.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json written by `experiment`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// csv, markdown or plotdata; repeat for several. Defaults to all three.
    #[arg(long)]
    pub format: Vec<String>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}
