//! `langtopo`: experiment driver for the graph-codebook pipeline.
//!
//! Subcommands cover the whole workflow — `gen-sbm` writes a synthetic
//! dataset, `train-stage1` fits the quantized graph encoders,
//! `train-stage2` aligns the text student against the frozen checkpoint,
//! `eval` scores the student on the test split, and `compare-lookup` /
//! `ablate-hops` / `gumbel-check` produce the diagnostic tables. Every
//! command is deterministic in (config, seed): reruns produce
//! byte-identical metric files.
//!
//! Exit codes: 0 success, 1 tolerance or runtime failure, 2 usage or
//! config error.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;

/// Command failure, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unparseable config, violated config invariants,
    /// missing referenced paths. Exit 2.
    Usage(String),
    /// A checked tolerance was exceeded. Exit 1.
    Tolerance(String),
    /// Training/IO failure after validation passed. Exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Tolerance(_) | CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Tolerance(msg) => write!(f, "{msg}"),
            CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment config file (TOML). Omit to run on built-in defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Global seed; beats both LANGTOPO_SEED and the config file.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Output root; beats the config file's `out_dir`.
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenSbmArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Dataset directory to write (default: the config's `data.dir`,
    /// else `<out_dir>/data`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Node count.
    #[arg(long)]
    pub n: Option<usize>,

    /// Block (= class) count.
    #[arg(long)]
    pub blocks: Option<usize>,

    /// Within-block edge probability.
    #[arg(long)]
    pub p_in: Option<f64>,

    /// Cross-block edge probability.
    #[arg(long)]
    pub p_out: Option<f64>,

    /// Feature width.
    #[arg(long)]
    pub d_in: Option<usize>,

    /// Positional-coordinate width for the structure channel (0 = none).
    #[arg(long)]
    pub d_pos: Option<usize>,

    /// Label signal mixed into features (0 = noise, 1 = one-hot labels).
    #[arg(long)]
    pub text_signal: Option<f64>,

    /// Fraction of nodes in the train split.
    #[arg(long)]
    pub train_ratio: Option<f64>,

    /// Fraction of nodes in the validation split.
    #[arg(long)]
    pub val_ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainStage1Args {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Epoch-count override.
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Selection-strategy override (gumbel_softmax, gumbel_argmax,
    /// argmax_cosine, argmax_euclidean).
    #[arg(long)]
    pub strategy: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainStage2Args {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Drop both alignment terms (sets alpha_mse = beta_kl = 0) and
    /// write under `stage2-noalign/` instead of `stage2/`.
    #[arg(long)]
    pub no_align: bool,

    /// Epoch-count override.
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Serialization-hops override (0, 1, or 2).
    #[arg(long)]
    pub hops: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Score the `stage2-noalign/` checkpoint instead of `stage2/`.
    #[arg(long)]
    pub no_align: bool,
}

#[derive(Debug, Args)]
pub struct CompareLookupArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Seed-count override.
    #[arg(long)]
    pub seeds: Option<usize>,

    /// Epoch-count override.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateHopsArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Seed-count override.
    #[arg(long)]
    pub seeds: Option<usize>,

    /// Stage-2 epoch-count override.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GumbelCheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Number of codes (logit-vector length).
    #[arg(long, default_value_t = 8)]
    pub k: usize,

    /// Monte Carlo sample count.
    #[arg(long, default_value_t = 200_000)]
    pub samples: usize,

    /// Maximum acceptable total-variation distance.
    #[arg(long, default_value_t = 0.02)]
    pub tolerance: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a stochastic-block-model dataset directory.
    GenSbm(GenSbmArgs),
    /// Train the quantized graph encoders (checkpoint + metrics.jsonl).
    TrainStage1(TrainStage1Args),
    /// Train the text student against a frozen stage-1 checkpoint.
    TrainStage2(TrainStage2Args),
    /// Score a trained student on the test split (JSON report).
    Eval(EvalArgs),
    /// Train stage 1 once per selection strategy; emit a diagnostics CSV.
    CompareLookup(CompareLookupArgs),
    /// Train stage 2 across hops x {aligned, unaligned}; emit a CSV.
    AblateHops(AblateHopsArgs),
    /// Monte Carlo check that gumbel-argmax sampling tracks the softmax.
    GumbelCheck(GumbelCheckArgs),
}

#[derive(Debug, Parser)]
#[command(name = "langtopo", version, about = "Graph-codebook training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Runs one parsed command to completion.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenSbm(args) => commands::gen_sbm(args),
        Command::TrainStage1(args) => commands::train_stage1(args),
        Command::TrainStage2(args) => commands::train_stage2(args),
        Command::Eval(args) => commands::eval(args),
        Command::CompareLookup(args) => commands::compare_lookup(args),
        Command::AblateHops(args) => commands::ablate_hops(args),
        Command::GumbelCheck(args) => commands::gumbel_check(args),
    }
}
