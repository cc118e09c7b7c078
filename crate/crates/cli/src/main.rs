//! `lowprec`: profile, allocate, fine-tune, report and export from the
//! command line. Every subcommand writes exactly what the matching library
//! call produces.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "lowprec", version, about = "Fixed-point conversion and fine-tuning of small CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the Giga1Net descriptor and print its op and parameter counts.
    Giga1net(OutArgs),
    /// Write the descriptor of the oriented-pattern network.
    PatternNet(OutArgs),
    /// Generate an oriented-pattern dataset.
    GenData(GenDataArgs),
    /// Measure weight and activation ranges of a model on sample inputs.
    Profile(ProfileArgs),
    /// Split a bit budget into integer and fractional bits per layer.
    Allocate(AllocateArgs),
    /// Train or fine-tune a model, optionally after applying an allocation.
    Finetune(FinetuneArgs),
    /// Sparsity report, plus the one-shot quantization study when an
    /// allocation is given.
    Report(ReportArgs),
    /// Write integer weight codes for a fixed-point accelerator.
    Export(ExportArgs),
    /// Run the complete reference experiment and write every artifact.
    Desk(OutArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of samples drawn (without replacement) from the dataset.
    #[arg(long, default_value_t = lowprec::profiler::DEFAULT_PROFILE_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    /// Range statistics written by `profile`.
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub bits: u32,
    /// Largest tolerated fraction of values outside the integer range.
    #[arg(long, default_value_t = 0.01)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Det,
    Stoch,
}

impl From<SchemeArg> for lowprec::RoundingScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Det => lowprec::RoundingScheme::Deterministic,
            SchemeArg::Stoch => lowprec::RoundingScheme::Stochastic,
        }
    }
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pretrained model to start from.
    #[arg(long, conflicts_with = "net", required_unless_present = "net")]
    pub model: Option<PathBuf>,
    /// Network descriptor to train from random initialization.
    #[arg(long)]
    pub net: Option<PathBuf>,
    /// Allocation to apply before training.
    #[arg(long)]
    pub alloc: Option<PathBuf>,
    /// Training data.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation data; defaults to the training data.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Required with the stochastic scheme.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Divides the learning rate whenever any layer is quantized.
    #[arg(long, default_value_t = 10.0)]
    pub lr_divisor: f64,
    #[arg(long, default_value_t = 4)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Epochs without improvement before stopping; 0 disables the rule.
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch history (JSON lines); defaults to `<out>.history.jsonl`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Allocation for the one-shot study.
    #[arg(long, requires = "study_out")]
    pub alloc: Option<PathBuf>,
    #[arg(long, requires = "alloc")]
    pub study_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sparsity report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// When given, the model's formats must match it.
    #[arg(long)]
    pub alloc: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
