//! `lens`: train, evaluate, and analyze small ensembles of adapted vision
//! transformers on synthetic template-classification data.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lens_core::backbone::ModelError;
use lens_core::data::DataError;
use lens_core::diversity::DiversityError;
use lens_core::train::TrainError;

pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

/// Failure carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: String) -> Self {
        CliError { code: EXIT_USAGE, message }
    }

    pub fn verify(message: String) -> Self {
        CliError { code: EXIT_VERIFY, message }
    }

    pub fn from_data(e: DataError) -> Self {
        CliError::usage(e.to_string())
    }

    pub fn from_diversity(e: DiversityError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Diverged { .. } => EXIT_DIVERGED,
            _ => EXIT_USAGE,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "lens",
    version,
    about = "Low-rank ensembles over a frozen vision transformer",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/test/OOD datasets.
    GenData(GenDataArgs),
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and report calibration metrics.
    Eval(EvalArgs),
    /// Evaluate in-distribution calibration plus OOD detection scores.
    OodEval(OodEvalArgs),
    /// Print exact parameter counts for a configuration.
    ParamCount(ParamCountArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Weight- and function-space diversity diagnostics over trained runs.
    AnalyzeDiversity(AnalyzeDiversityArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output directory for train.lds, test.lds, ood.lds, and spec.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Noise seed; template geometry is controlled by the template seeds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 2000)]
    pub train_samples: usize,
    #[arg(long, default_value_t = 500)]
    pub test_samples: usize,
    #[arg(long, default_value_t = 7)]
    pub template_seed: u64,
    /// Template seed for the out-of-distribution split; must differ from
    /// the in-distribution template seed.
    #[arg(long, default_value_t = 8)]
    pub ood_template_seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub noise_std: f64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    pub out: Option<String>,
    /// Override the configured worker thread count (0 = library default).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Override the configured ensemble size.
    #[arg(long)]
    pub members: Option<usize>,
    /// Override the configured adapter rank.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Override the configured adapter init gain.
    #[arg(long)]
    pub gain: Option<f64>,
    /// Override the configured softmax temperature recorded for evaluation.
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Trained checkpoint (checkpoint.lens).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset to evaluate on (.lds).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Run configuration; defaults to resolved.json next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corruption kind to apply before evaluation
    /// (gaussian_noise, blur, contrast, pixel_dropout).
    #[arg(long)]
    pub corruption: Option<String>,
    /// Corruption severity 0..=5; 0 leaves the data unchanged.
    #[arg(long, default_value_t = 0)]
    pub severity: u8,
    /// Softmax temperature; defaults to the value stored in the run config.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Seed for stochastic prediction (dropout samples, epistemic indices).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the JSON report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker thread count (0 = library default).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args)]
pub struct OodEvalArgs {
    /// Trained checkpoint (checkpoint.lens).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// In-distribution dataset (.lds).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Out-of-distribution dataset (.lds); labels are ignored.
    #[arg(long)]
    pub ood: PathBuf,
    /// Run configuration; defaults to resolved.json next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Softmax temperature; defaults to the value stored in the run config.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Seed for stochastic prediction.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the JSON report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ParamCountArgs {
    /// Built-in geometry: micro or vit_base_32.
    #[arg(long, default_value = "micro")]
    pub profile: String,
    /// Ensembling method (single, lora, explicit, batch, batch_pp,
    /// mc_dropout, snapshot, last_layer, epinet).
    #[arg(long, default_value = "lora")]
    pub method: String,
    /// Count for an explicit run configuration instead of a profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the member count.
    #[arg(long)]
    pub members: Option<usize>,
    /// Override the adapter rank.
    #[arg(long)]
    pub rank: Option<usize>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Minimum number of per-operation probes across all ops.
    #[arg(long, default_value_t = 100)]
    pub probes: usize,
}

#[derive(Args)]
pub struct AnalyzeDiversityArgs {
    /// Training output directory (checkpoint.lens + resolved.json); repeat
    /// to pool members across runs of the same configuration.
    #[arg(long, required = true)]
    pub run: Vec<PathBuf>,
    /// Dataset whose predictions define the function-space diagnostics.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Singular directions inspected per weight matrix.
    #[arg(long, default_value_t = 16)]
    pub top_k: usize,
    /// Cosine-similarity threshold below which a final singular direction
    /// counts as an intruder.
    #[arg(long, default_value_t = 0.3)]
    pub threshold: f64,
    /// Directory for diversity.json and function_space.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(args) => commands::cmd_gen_data(args),
        Command::Train(args) => commands::cmd_train(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::OodEval(args) => commands::cmd_ood_eval(args),
        Command::ParamCount(args) => commands::cmd_param_count(args),
        Command::Gradcheck(args) => commands::cmd_gradcheck(args),
        Command::AnalyzeDiversity(args) => commands::cmd_analyze_diversity(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("LENS_LOG")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
