use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::Config;

#[derive(Debug, Parser)]
#[command(name = "fracvit", version, about = "Femur fracture classification: training, evaluation, clustering and reader-study service")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (manifest plus PNG images).
    Synth(SynthArgs),
    /// Train a classifier; writes checkpoint, split plan and JSONL epoch log.
    Train(TrainArgs),
    /// Metric report for a checkpoint on a split, or for a predictions CSV.
    Eval(EvalArgs),
    /// Deep embedded clustering of encoder features.
    Cluster(ClusterArgs),
    /// Attention-rollout heatmaps for selected samples.
    Rollout(RolloutArgs),
    /// Train the hierarchical baseline and report on the test split.
    Cascade(CascadeArgs),
    /// Serve the HTTP inference and reader-study API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub per_class: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Options shared by the commands that train models.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model preset: tiny or paper-large-16.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// weights, oversample or augment.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split plan written by `train`; its test ids are evaluated. Without it
    /// every manifest sample is used.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// CSV with `truth` and `pred` columns of class names.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Report destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Assignment CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    /// Autoencoder widths after the feature width, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Sample ids, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ids: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CascadeArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// hard or soft combination of stage outputs.
    #[arg(long, default_value = "soft")]
    pub mode: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset whose test split supplies the study cases.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory of session logs.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub addr: Option<String>,
    #[arg(long)]
    pub washout_secs: Option<u64>,
    #[arg(long)]
    pub cases: Option<usize>,
    /// Seed of the split plan that defines the test cases.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 2 for usage errors, 1 for runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = Config::load(cli.config.as_deref()).and_then(|config| match cli.command {
        Command::Synth(a) => commands::synth(&a, &config),
        Command::Train(a) => commands::train(&a.flags, &config),
        Command::Eval(a) => commands::eval(&a, &config),
        Command::Cluster(a) => commands::cluster(&a, &config),
        Command::Rollout(a) => commands::rollout(&a, &config),
        Command::Cascade(a) => commands::cascade(&a, &config),
        Command::Serve(a) => commands::serve(&a, &config),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
