//! The `l2c` command line: dataset generation, training, evaluation,
//! captioning, gradient checks and the K sweep.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;

pub use manifest::{hash_inputs, RunManifest, MANIFEST_NAME};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "l2c", version, about = "Visual comparison captioning on synthetic creatures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model and keep the checkpoint with the best validation ROUGE-L.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split; prints the report as JSON.
    Eval(EvalArgs),
    /// Describe the differences between two creature specs.
    Caption(CaptionArgs),
    /// Finite-difference check of every op and model pathway.
    Gradcheck(GradcheckArgs),
    /// Train one model per K and tabulate validation scores as CSV.
    SweepK(SweepKArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 400)]
    pub n_pairs: usize,
    #[arg(long, default_value_t = 400)]
    pub n_singles: usize,
    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub fractions: Vec<f64>,
    /// References per single image.
    #[arg(long, default_value_t = 10)]
    pub single_captions: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings shared by `train` and `sweep-k`.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Starting point: `desk` or `full`.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// `key=value` config file applied over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, applied last; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub no_semantic_pool: bool,
    #[arg(long)]
    pub no_tv: bool,
    #[arg(long)]
    pub no_gcn: bool,
    #[arg(long)]
    pub no_single_task: bool,
    /// Log losses every this many steps.
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint directory (for example `<out>/last`).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Also write the report and a run manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// First creature: inline JSON or a path to a JSON file.
    #[arg(long)]
    pub pair_spec_a: String,
    /// Second creature: inline JSON or a path to a JSON file.
    #[arg(long)]
    pub pair_spec_b: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random inputs per tensor op.
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepKArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [3, 6, 9, 12])]
    pub values: Vec<usize>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// How a command ended, short of an error.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    VerificationFailed,
}

fn error_exit(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

pub fn dispatch(cli: Cli) -> Result<Outcome, Error> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Caption(a) => commands::caption(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::SweepK(a) => commands::sweep_k(a),
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::VerificationFailed) => EXIT_VERIFY,
        Err(e) => {
            eprintln!("error: {e}");
            error_exit(&e)
        }
    }
}
