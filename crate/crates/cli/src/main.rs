//! Command-line front end: train, evaluate, compare, gradient-check,
//! dump attention maps and augment corpora.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use gated_disentangle::attention::AttentionVariant;
use gated_disentangle::pipeline::AugmentMode;

#[derive(Parser, Debug)]
#[command(name = "gated-disentangle", version, about = "Gated disentangled attention text classifier")]
pub struct Cli {
    /// `key = value` file supplying defaults for any long flag.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Split, augment, train and save a checkpoint.
    Train(TrainCmd),
    /// Score a checkpoint on a labeled CSV.
    Eval(EvalCmd),
    /// Train several attention variants under identical settings.
    Compare(CompareCmd),
    /// Compare analytic gradients with central differences on tiny models.
    Gradcheck(GradcheckCmd),
    /// Export one head's attention weights for a sentence.
    Attnmap(AttnmapCmd),
    /// Write a CSV with paraphrased copies appended.
    Augment(AugmentCmd),
}

#[derive(Args, Debug, Clone)]
pub struct AugmentArgs {
    #[arg(long, default_value = "none")]
    pub augment: AugmentMode,
    /// Paraphrases per training example.
    #[arg(long, default_value_t = 1)]
    pub copies: usize,
    #[arg(long, default_value_t = 0.5)]
    pub swap_probability: f64,
    /// Translation endpoint; otherwise GATED_DISENTANGLE_TRANSLATE_URL, then the built-in default.
    #[arg(long, value_name = "URL")]
    pub translate_url: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value = "adam", value_parser = ["adam", "sgd"])]
    pub optimizer: String,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub ffn: usize,
    #[arg(long, default_value_t = 8)]
    pub k_max: usize,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    /// Classifier hidden width; defaults to d-model.
    #[arg(long)]
    pub head_hidden: Option<usize>,
    /// Also divide each score term by sqrt(d_head).
    #[arg(long)]
    pub literal_scaling: bool,
    #[command(flatten)]
    pub augment: AugmentArgs,
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[arg(long, value_name = "CSV")]
    pub data: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Per-epoch log; defaults to `<out>.log.csv`.
    #[arg(long, value_name = "CSV")]
    pub log: Option<PathBuf>,
    #[arg(long, default_value = "gated")]
    pub variant: AttentionVariant,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    All,
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    #[arg(long, value_name = "PATH")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "CSV")]
    pub data: PathBuf,
    /// Rows to score; `train`/`test` redo the split stored with the checkpoint.
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitChoice,
    /// Prefix for `.report.csv`, `.confusion.csv` and `.per_class.csv`.
    #[arg(long, value_name = "PREFIX")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareCmd {
    #[arg(long, value_name = "CSV")]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "entangled,static,gated")]
    pub variants: Vec<AttentionVariant>,
    /// Report CSV path.
    #[arg(long, value_name = "CSV")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum VariantChoice {
    Entangled,
    Static,
    Gated,
    All,
}

#[derive(Args, Debug)]
pub struct GradcheckCmd {
    #[arg(long, value_enum, default_value = "all")]
    pub variant: VariantChoice,
    /// Also check the classifier head on its own.
    #[arg(long)]
    pub abfnn: bool,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AttnmapCmd {
    #[arg(long, value_name = "PATH")]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub text: String,
    /// Zero-based layer index.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Zero-based head index.
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    /// Prefix for `.csv`, `.pgm` and `.tokens.txt`.
    #[arg(long, value_name = "PREFIX")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AugmentCmd {
    #[arg(long, value_name = "CSV")]
    pub data: PathBuf,
    #[arg(long, default_value = "rule")]
    pub mode: AugmentMode,
    #[arg(long, default_value_t = 1)]
    pub copies: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub swap_probability: f64,
    #[arg(long, value_name = "URL")]
    pub translate_url: Option<String>,
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let args = match config::merge_config(std::env::args_os().collect(), &Cli::command()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();

    match commands::run(cli.command) {
        Ok(code) => code,
        Err(commands::CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::CliError::Pipeline(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
