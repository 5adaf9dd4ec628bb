use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use sml_core::data::{resolve_dataset, DatasetSchema, DatasetSplit};
use sml_core::experiment::{
    cmd_export_components, cmd_landscape, cmd_report, cmd_run, cmd_sweep_beta, ExperimentConfig, LandscapeConfig,
    RunOutcome, SWEEP_BETAS,
};
use sml_core::exec::derive_seed;
use sml_core::SmlError;

#[derive(Parser)]
#[command(name = "sml", version, about = "Dropout uncertainty with the second-moment loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate methods on a dataset.
    Run(RunArgs),
    /// Repeat `run` for several β values of SML.
    SweepBeta {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated β values.
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_BETAS)]
        betas: Vec<f64>,
    },
    /// Tabulate the analytical loss landscape and its minima.
    Landscape(LandscapeArgs),
    /// Merge run directories into summary and correlation tables.
    Report {
        /// Directories containing reports.csv.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "sml-report")]
        out: PathBuf,
    },
    /// Write residuals and sub-network deviations of a saved model.
    ExportComponents(ExportArgs),
}

/// Every field of the TOML config, overridable individually.
#[derive(Args, Clone)]
struct RunArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    /// CSV file of the dataset (not needed for `toy`).
    #[arg(long)]
    data_path: Option<PathBuf>,
    /// JSON column schema for the CSV.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Methods: MC, MC-LL, SML, PU, DE, PU-DE.
    #[arg(long = "method", value_delimiter = ',')]
    methods: Vec<String>,
    /// Splits: iid_train, iid_test, pca_interp, pca_extrap, label_interp, label_extrap.
    #[arg(long = "split", value_delimiter = ',')]
    splits: Vec<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    keep_prob: Option<f64>,
    /// Sub-networks sampled per prediction.
    #[arg(long)]
    samples: Option<usize>,
    /// ECE bins.
    #[arg(long)]
    bins: Option<usize>,
    /// Hidden layer widths, comma-separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long)]
    ensemble_size: Option<usize>,
    #[arg(long)]
    chunk_count: Option<usize>,
    #[arg(long)]
    toy_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    no_models: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig, SmlError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_toml_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.dataset {
            c.dataset = v.clone();
        }
        if self.data_path.is_some() {
            c.data_path = self.data_path.clone();
        }
        if self.schema.is_some() {
            c.schema = self.schema.clone();
        }
        if !self.methods.is_empty() {
            c.methods = self.methods.iter().map(|m| m.parse()).collect::<Result<_, _>>()?;
        }
        if !self.splits.is_empty() {
            c.splits = self.splits.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
        }
        if !self.hidden.is_empty() {
            c.hidden = self.hidden.clone();
        }
        c.folds = self.folds.or(c.folds);
        c.epochs = self.epochs.or(c.epochs);
        c.batch_size = self.batch_size.or(c.batch_size);
        c.learning_rate = self.learning_rate.or(c.learning_rate);
        c.ensemble_size = self.ensemble_size.or(c.ensemble_size);
        c.beta = self.beta.unwrap_or(c.beta);
        c.keep_prob = self.keep_prob.unwrap_or(c.keep_prob);
        c.samples = self.samples.unwrap_or(c.samples);
        c.bins = self.bins.unwrap_or(c.bins);
        c.chunk_count = self.chunk_count.unwrap_or(c.chunk_count);
        c.toy_size = self.toy_size.unwrap_or(c.toy_size);
        c.seed = self.seed.unwrap_or(c.seed);
        c.jobs = self.jobs.unwrap_or(c.jobs);
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if self.no_models {
            c.save_models = false;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct LandscapeArgs {
    /// TOML landscape configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mu_min: Option<f64>,
    #[arg(long)]
    mu_max: Option<f64>,
    #[arg(long)]
    mu_steps: Option<usize>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    sigma_steps: Option<usize>,
    /// Monte-Carlo samples per grid point (0 = closed form only).
    #[arg(long)]
    mc_n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl LandscapeArgs {
    fn resolve(&self) -> anyhow::Result<LandscapeConfig> {
        let mut c = match &self.config {
            Some(p) => toml::from_str(&std::fs::read_to_string(p)?).map_err(SmlError::from)?,
            None => LandscapeConfig::default(),
        };
        c.mu_min = self.mu_min.unwrap_or(c.mu_min);
        c.mu_max = self.mu_max.unwrap_or(c.mu_max);
        c.mu_steps = self.mu_steps.unwrap_or(c.mu_steps);
        c.sigma_max = self.sigma_max.unwrap_or(c.sigma_max);
        c.sigma_steps = self.sigma_steps.unwrap_or(c.sigma_steps);
        c.mc_n = self.mc_n.unwrap_or(c.mc_n);
        c.seed = self.seed.unwrap_or(c.seed);
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        Ok(c)
    }
}

#[derive(Args)]
struct ExportArgs {
    /// Model JSON written by `run`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    data_path: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Split JSON written by `run`; its test rows are exported. All rows otherwise.
    #[arg(long)]
    split_file: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 2000)]
    toy_size: usize,
    /// Root seed of the run that produced the model (regenerates `toy` data).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "components.csv")]
    out: PathBuf,
}

/// Exit code 2 for configuration and argument errors, 1 otherwise.
fn failure_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<SmlError>() {
        Some(SmlError::Config(_) | SmlError::Argument(_) | SmlError::Toml(_)) => 2,
        _ => 1,
    }
}

fn run_outcome(outcome: &RunOutcome, out: &std::path::Path) -> ExitCode {
    println!(
        "{} reports, {} failed runs -> {}",
        outcome.reports.len(),
        outcome.failures.len(),
        out.display()
    );
    if outcome.succeeded() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let outcome = cmd_run(&cfg)?;
            Ok(run_outcome(&outcome, &cfg.out))
        }
        Command::SweepBeta { run, betas } => {
            let cfg = run.resolve()?;
            let results = cmd_sweep_beta(&cfg, &betas)?;
            let failed: usize = results.iter().map(|(_, o)| o.failures.len()).sum();
            println!("{} β values, {failed} failed runs -> {}", results.len(), cfg.out.display());
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Landscape(args) => {
            let cfg = args.resolve()?;
            let outcome = cmd_landscape(&cfg)?;
            if let Some(p) = outcome.argmin.iter().find(|p| p.sigma == 0.0) {
                println!("argmin at sigma = 0: mu = {:.6}, loss = {:.6}", p.mu, p.loss);
            }
            println!("bifurcation at sigma = {:.4}", outcome.bifurcation);
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { runs, out } => {
            let reports = cmd_report(&runs, &out)?;
            println!("{} reports merged -> {}", reports.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportComponents(args) => {
            let schema = args.schema.as_deref().map(DatasetSchema::from_json_file).transpose()?;
            // `run` generates toy data from the same derived stream.
            let toy_seed = derive_seed(args.seed, "toy");
            let data = resolve_dataset(&args.dataset, args.data_path.as_deref(), schema.as_ref(), args.toy_size, toy_seed)?;
            let split = match &args.split_file {
                Some(p) => Some(DatasetSplit::from_json(
                    &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                )?),
                None => None,
            };
            let rows = cmd_export_components(&args.model, &data, split.as_ref(), args.samples, args.seed, &args.out)?;
            println!("{rows} rows -> {}", args.out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(failure_code(&e))
        }
    }
}
