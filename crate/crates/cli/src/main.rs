use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

/// Hybrid conv/attention models with scheduled reparameterization.
#[derive(Parser, Debug)]
#[command(name = "prs", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics, checkpoints and a final depth profile.
    Train(TrainArgs),
    /// Reparameterize a random convolution and compare outputs everywhere.
    ReparamCheck(ReparamArgs),
    /// Depth profile of Δ log amplitude for a checkpoint.
    Fourier(FourierArgs),
    /// Print the per-layer conv to attention switch table.
    Schedule(ScheduleArgs),
    /// Train the four conv/attention splits and compare their depth profiles.
    Interp(InterpArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Built-in preset (desk or full); ignored when --config is given.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optim.lr=1e-3`. Applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Root under which run directories are created.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Shorthand for `--set schedule.kind=KIND` (prs, all-conv, all-sa, uniform:E).
    #[arg(long)]
    pub schedule: Option<String>,
    /// Continue the run in this directory from its newest checkpoint.
    #[arg(long, value_name = "RUN_DIR")]
    pub resume: Option<PathBuf>,
    /// No per-epoch progress lines.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct ReparamArgs {
    #[arg(long = "kernel", short = 'k', default_value_t = 3)]
    pub kernel: usize,
    #[arg(long = "dim", short = 'd', default_value_t = 16)]
    pub dim: usize,
    /// Side of the square token grid.
    #[arg(long, default_value_t = 8)]
    pub grid: usize,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100.0)]
    pub beta: f32,
    /// Add Gaussian noise of this scale to the output projection after the
    /// transfer; the check should then fail.
    #[arg(long)]
    pub perturb: Option<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TapArg {
    PostResidual,
    PreResidual,
}

#[derive(Args, Debug)]
pub struct FourierArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `synthetic`, `cifar10:DIR` or `cifar100:DIR`; defaults to the
    /// checkpoint's own eval data.
    #[arg(long)]
    pub data: Option<String>,
    /// Defaults to the checkpoint's spectral.tap.
    #[arg(long, value_enum)]
    pub tap: Option<TapArg>,
    /// Number of eval images; defaults to spectral.images.
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Csv,
    Json,
}

#[derive(Args, Debug)]
pub struct ScheduleArgs {
    #[arg(long, short = 't')]
    pub epochs: u32,
    #[arg(long, short = 'l')]
    pub layers: usize,
    #[arg(long, default_value = "prs")]
    pub kind: String,
    #[arg(long, value_enum, default_value_t = TableFormat::Csv)]
    pub format: TableFormat,
}

#[derive(Args, Debug)]
pub struct InterpArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Shorthand for `--set schedule.epochs=N`.
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Reuse finished settings and checkpoints in this run directory.
    #[arg(long, value_name = "RUN_DIR")]
    pub resume: Option<PathBuf>,
    #[arg(long, short)]
    pub quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::ReparamCheck(a) => commands::reparam_check(a),
        Command::Fourier(a) => commands::fourier(a),
        Command::Schedule(a) => commands::schedule(a),
        Command::Interp(a) => commands::interp(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
