//! Command-line front end: fitting, dynamic prediction, model averaging and
//! the simulation study.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

mod artifacts;
mod commands;
mod error;

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "jmbma", version, about = "Bayesian joint models with model-averaged dynamic predictions")]
pub struct Cli {
    /// Worker threads; all available cores when absent.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Master seed; falls back to JMBMA_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one joint model by MCMC.
    Fit(FitArgs),
    /// Dynamic predictions for new subjects from one fitted model.
    Predict(PredictArgs),
    /// Model-averaged predictions and weights over several fitted models.
    Bma(BmaArgs),
    /// Simulate scenario data and run the held-out prediction study.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data_long: PathBuf,
    #[arg(long)]
    pub data_surv: PathBuf,
    /// Joint model specification (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Chain configuration (JSON); 20000 iterations with 5000 burn-in when
    /// absent.
    #[arg(long)]
    pub chain: Option<PathBuf>,
    /// Ingestion options (JSON): transform and categorical covariates.
    #[arg(long)]
    pub ingest: Option<PathBuf>,
    #[arg(long, default_value = "fit_out")]
    pub out: PathBuf,
    /// Skip the dataset evidence needed for model averaging.
    #[arg(long)]
    pub no_evidence: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Survival,
    Longitudinal,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory written by `fit`.
    #[arg(long = "fit")]
    pub fit_dir: PathBuf,
    /// Longitudinal CSV of the subjects to predict for.
    #[arg(long)]
    pub target: PathBuf,
    /// Survival-format CSV with the targets' baseline covariates.
    #[arg(long)]
    pub data_surv: Option<PathBuf>,
    /// Comma-separated absolute prediction times.
    #[arg(long, value_delimiter = ',', required = true)]
    pub horizons: Vec<f64>,
    #[arg(long, value_enum, default_value = "survival")]
    pub kind: Kind,
    /// Posterior draws used per prediction.
    #[arg(long)]
    pub n_mc: Option<usize>,
    #[arg(long, default_value = "predict_out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BmaArgs {
    /// Directories written by `fit`, one per candidate model.
    #[arg(long = "fit", required = true)]
    pub fit_dirs: Vec<PathBuf>,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub data_surv: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub horizons: Vec<f64>,
    /// Prior model probabilities; uniform when absent.
    #[arg(long, value_delimiter = ',')]
    pub prior: Option<Vec<f64>>,
    #[arg(long)]
    pub n_mc: Option<usize>,
    #[arg(long, default_value = "bma_out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario tag: I, II, III or IV.
    #[arg(long)]
    pub scenario: String,
    /// Number of simulated datasets.
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Scenario configuration (JSON) replacing the pinned defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub chain: Option<PathBuf>,
    #[arg(long)]
    pub n_subjects: Option<usize>,
    /// Censored subjects held out per replicate.
    #[arg(long, default_value_t = 10)]
    pub n_holdout: usize,
    /// Write the simulated datasets without fitting.
    #[arg(long)]
    pub simulate_only: bool,
    #[arg(long, default_value = "simulate_out")]
    pub out: PathBuf,
}

/// Seed from the flag, then `JMBMA_SEED`.
pub fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("JMBMA_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::User(format!("JMBMA_SEED is not an unsigned integer: `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::User("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }
    let seed = resolve_seed(cli.seed)?;
    let threads = cli.threads.unwrap_or_else(rayon::current_num_threads);
    match cli.command {
        Command::Fit(a) => commands::fit(&a, seed, threads),
        Command::Predict(a) => commands::predict(&a, seed, threads),
        Command::Bma(a) => commands::bma(&a, seed, threads),
        Command::Simulate(a) => commands::simulate(&a, seed, threads),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
/// Failures print a JSON error object on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                return 0;
            }
            let err = CliError::User(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

pub(crate) fn version_info() -> serde_json::Value {
    json!({ "jmbma": env!("CARGO_PKG_VERSION") })
}
