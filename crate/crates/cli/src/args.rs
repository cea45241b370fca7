use std::path::PathBuf;

use caetc_core::backbone::BackboneKind;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "caetc", version, about = "Counterfactual outcome estimation over time")]
pub struct Cli {
    /// Log progress at info level (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate train/val/test splits of the tumour-growth benchmark.
    SimulateNsclc(SimulateNsclcArgs),
    /// Simulate semi-synthetic splits on stand-in or ingested covariates.
    SimulateSemisynth(SimulateSemisynthArgs),
    /// Convert an hourly ICU extract into covariate panels.
    IngestMimic(IngestArgs),
    /// Train a model on a simulated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test protocol.
    Evaluate(EvaluateArgs),
    /// Run the exact divergence and error-bound checks.
    VerifyTheory(VerifyArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Aggregate evaluation reports across seeds into one table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackboneArg {
    Lstm,
    Tcn,
}

impl From<BackboneArg> for BackboneKind {
    fn from(b: BackboneArg) -> Self {
        match b {
            BackboneArg::Lstm => BackboneKind::Lstm,
            BackboneArg::Tcn => BackboneKind::Tcn,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct SimulateNsclcArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Training units; validation and test default to a tenth of this.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct SimulateSemisynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Panels written by `ingest-mimic`; the synthetic stand-in is used otherwise.
    #[arg(long)]
    pub panels: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub gamma_y: Option<f64>,
    #[arg(long)]
    pub gamma_x: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct IngestArgs {
    /// Hourly comma-separated extract with a header row.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Directory written by a simulate command.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Plain sequence regression: no balancing, treatment losses or modulation.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneArg>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub projection_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub delta_a: Option<f64>,
    #[arg(long)]
    pub delta_x: Option<f64>,
    #[arg(long)]
    pub delta_e: Option<f64>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    /// Disable training-time covariate cutoff.
    #[arg(long)]
    pub no_cutoff: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// random_trajectories, no_confounding or factual.
    #[arg(long, default_value = "random_trajectories")]
    pub setting: String,
    /// Prediction horizon; defaults to 5 for NSCLC and 10 for semi-synthetic data.
    #[arg(long)]
    pub tau: Option<usize>,
    /// Random plans per history.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
    /// Directory for report.csv, report.json and the config echo.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    /// `METHOD=report.json[,report.json...]`, repeatable.
    #[arg(long = "run", required = true)]
    pub runs: Vec<String>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}
