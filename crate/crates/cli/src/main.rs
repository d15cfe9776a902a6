//! `g2d`: generate synthetic data, pre-train, evaluate, and check gradients.
//!
//! Exit codes: 0 success, 2 bad flags or configuration, 3 I/O failure,
//! 4 non-finite loss during training, 5 checkpoint/data/config mismatch,
//! 6 gradient check failure. Data and JSON go to stdout, diagnostics to
//! stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "g2d",
    version,
    about = "Global-to-dense vision-language pre-training on synthetic data"
)]
struct Cli {
    /// Worker threads for data generation and evaluation (training itself
    /// is single-threaded).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic image-caption dataset (G2DS).
    Generate(GenerateArgs),
    /// Pre-train a model and write a checkpoint (G2CK) plus JSON-lines metrics.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint and print one JSON report.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable op and the full objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub img_hw: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.75)]
    pub p_finding: f64,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key=value configuration file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Any configuration key, as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// JSON-lines metrics path [default: <out>.metrics.jsonl].
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub pct: Option<f64>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub proj_dim: Option<usize>,
    #[arg(long)]
    pub no_aggregation: bool,
    #[arg(long)]
    pub no_body_mask: bool,
    #[arg(long)]
    pub no_smoothing: bool,
    #[arg(long, value_enum)]
    pub decoder_loss: Option<DecoderLossArg>,
    #[arg(long, value_enum)]
    pub vla_mode: Option<VlaModeArg>,
    #[arg(long, value_enum)]
    pub dice_form: Option<DiceFormArg>,
    #[arg(long, value_enum)]
    pub threshold_scope: Option<ScopeArg>,
    #[arg(long)]
    pub shuffle_masks: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write pseudo masks of the first training records here periodically.
    #[arg(long)]
    pub export_masks: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    pub export_every: u64,
    /// Add retrieval and mask-IoU fields to every N-th metrics line (0 = off).
    #[arg(long, default_value_t = 0)]
    pub eval_every: u64,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DecoderLossArg {
    PseudoSeg,
    Reconstruction,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum VlaModeArg {
    I2t,
    Symmetric,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DiceFormArg {
    ImageSoft,
    LiteralPixel,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    WithinBody,
    Global,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Retrieval,
    ZeroshotCls,
    Grounding,
    MaskQuality,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PixelArg {
    Direct,
    ValuePath,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    #[arg(long, default_value_t = 32)]
    pub k_eval: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PixelArg::ValuePath)]
    pub pixel_features: PixelArg,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// First of the consecutive seeds to check.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = g2d_core::diagnostics::DEFAULT_SEEDS)]
    pub seeds: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        eprintln!("error: cannot start {} threads: {e}", cli.threads);
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
