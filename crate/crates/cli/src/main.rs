mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use discorec::datamodel::Split;
use discorec::evaluate::Popularity;
use discorec::featurize::DropoutMode;
use discorec::neighbors::IndexMode;
use discorec::objective::Variant;

/// Episode discovery recommender: synthetic data, two-tower training with
/// contrastive augmentation, and ranking evaluation.
#[derive(Debug, Parser)]
#[command(name = "discorec", version)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Cap on worker threads.
    #[arg(long, global = true, env = "DISCOREC_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model variant (or a grid of them) and write the best checkpoint.
    Train(TrainArgs),
    /// Evaluate checkpoints and popularity baselines on a split.
    Eval(EvalArgs),
    /// Merge evaluation reports into one comparison table and bucket CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub shows: Option<usize>,
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub sharpness: Option<f64>,
    #[arg(long)]
    pub kg_signal: Option<f64>,
    #[arg(long)]
    pub content_signal: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: discorec::Error| e.to_string())
}

fn parse_baseline(s: &str) -> Result<Popularity, String> {
    s.parse().map_err(|e: discorec::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: discorec::Error| e.to_string())
}

fn parse_index_mode(s: &str) -> Result<IndexMode, String> {
    match s {
        "exact" => Ok(IndexMode::Exact),
        "approximate" => Ok(IndexMode::Approximate),
        _ => Err(format!("unknown neighbor mode `{s}` (expected exact or approximate)")),
    }
}

fn parse_dropout_mode(s: &str) -> Result<DropoutMode, String> {
    match s {
        "field" => Ok(DropoutMode::Field),
        "entry" => Ok(DropoutMode::Entry),
        _ => Err(format!("unknown dropout mode `{s}` (expected field or entry)")),
    }
}

fn parse_probability(s: &str) -> Result<f64, String> {
    let p: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(format!("dropout {p} outside [0, 1]"))
    }
}

fn parse_layers(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(format!("layer count `{s}` must be a positive integer")),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint and training log.
    #[arg(long)]
    pub out: PathBuf,
    /// One of tt, tt-fd, msacl-content, msacl-kg, msacl-kg-fd.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Use both directions of every contrastive pair.
    #[arg(long)]
    pub symmetric: bool,
    /// Layer counts to try, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_layers)]
    pub layers: Option<Vec<usize>>,
    /// Dropout probabilities to try, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_probability)]
    pub dropout: Option<Vec<f64>>,
    #[arg(long, value_parser = parse_dropout_mode)]
    pub dropout_mode: Option<DropoutMode>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Drop the ReLU after the last layer.
    #[arg(long)]
    pub linear_head: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub k_negatives: Option<usize>,
    /// Use other batch positives as negatives.
    #[arg(long)]
    pub in_batch_negatives: bool,
    #[arg(long)]
    pub neighbor_k: Option<usize>,
    #[arg(long, value_parser = parse_index_mode)]
    pub neighbor_mode: Option<IndexMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rank every episode during validation, including familiar shows.
    #[arg(long)]
    pub no_masking: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint files to evaluate; repeatable.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Popularity baselines: pop, pop-country, pop-age-country.
    #[arg(long, value_delimiter = ',', value_parser = parse_baseline)]
    pub baselines: Option<Vec<Popularity>>,
    /// Split to evaluate on.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    /// Rank every episode, including familiar shows.
    #[arg(long)]
    pub no_masking: bool,
    /// Output directory for report.json, report.txt and buckets.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report files written by `eval`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Directory for comparison.txt and buckets.csv; printed only if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure caused by how the program was invoked rather than by the run.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
