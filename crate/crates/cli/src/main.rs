//! `cit`: data generation, both training stages, inference, evaluation and
//! self-verification.
//!
//! Exit status is 0 on success, 1 on a usage or configuration error and 2 on
//! a runtime error. Diagnostics go to standard error; results go to files or
//! standard output.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "cit", version, about = "Two-stage virtual try-on: cloth warping and try-on rendering")]
#[command(after_help = "CIT_THREADS caps worker threads; CIT_THREADS=1 gives bit-reproducible outputs.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of person/cloth/target samples.
    GenData(GenDataArgs),
    /// Train the geometric matching stage and save its checkpoint.
    TrainMatching(TrainMatchingArgs),
    /// Train the try-on stage on top of a frozen matching checkpoint.
    TrainTryon(TrainTryonArgs),
    /// Warp one in-shop cloth onto one person.
    Warp(WarpArgs),
    /// Render try-on images and composition masks.
    Tryon(TryonArgs),
    /// Score predicted images and masks against references.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
    /// Print the program and file-format versions.
    Version,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory; one sample_NNNNNN directory per sample.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    count: usize,
    /// Dataset seed; sample seeds derive from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Config file supplying height, width and grid_k.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Image height in pixels [config or 64].
    #[arg(long)]
    height: Option<usize>,
    /// Image width in pixels [config or 48].
    #[arg(long)]
    width: Option<usize>,
    /// Control lattice size K of the ground-truth warp [config or 5].
    #[arg(long)]
    grid_k: Option<usize>,
}

/// Training hyperparameters; `--config` is applied first, flags override it.
#[derive(Args, Debug)]
struct TrainFlags {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Any config key, e.g. `--set d_model=16`; repeatable, applied after the named flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Ablation variant: B1, B2, B3 or B4.
    #[arg(long)]
    ablation: Option<String>,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Samples per step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Step at which linear decay to zero begins.
    #[arg(long)]
    decay_start: Option<usize>,
    /// Seed for initialization and sample order.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the loss every N steps to standard error; 0 disables.
    #[arg(long, default_value_t = 100, value_name = "N")]
    log_every: usize,
    /// Write `step loss` for every step to this file.
    #[arg(long, value_name = "FILE")]
    loss_log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainMatchingArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct TrainTryonArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Matching checkpoint; its config is the base that --config and flags override.
    #[arg(long)]
    stage1: PathBuf,
    /// Checkpoint file to write; holds both stages.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct WarpArgs {
    /// Checkpoint holding matching weights.
    #[arg(long)]
    ckpt: PathBuf,
    /// Person representation (CITT tensor, 8 × H × W).
    #[arg(long)]
    person: PathBuf,
    /// In-shop cloth image (PPM).
    #[arg(long)]
    cloth: PathBuf,
    /// Cloth mask (PGM); defaults to the non-white pixels of --cloth.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Warped cloth image to write (PPM).
    #[arg(long)]
    out: PathBuf,
    /// Warped cloth mask to write (PGM).
    #[arg(long, value_name = "FILE")]
    mask_out: Option<PathBuf>,
    /// Regressed control-point offsets to write (CITT).
    #[arg(long, value_name = "FILE")]
    theta_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TryonArgs {
    /// Checkpoint holding both stages (written by train-tryon).
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory; receives NAME.ppm (try-on image) and NAME.pgm (composition mask).
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory; renders every sample under its directory name.
    #[arg(long, conflicts_with_all = ["person", "cloth", "mask", "name"])]
    data: Option<PathBuf>,
    /// Person representation (CITT) for a single rendering.
    #[arg(long, requires = "cloth")]
    person: Option<PathBuf>,
    /// In-shop cloth image (PPM) for a single rendering.
    #[arg(long, requires = "person")]
    cloth: Option<PathBuf>,
    /// Cloth mask (PGM); defaults to the non-white pixels of --cloth.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Output file stem for a single rendering.
    #[arg(long, default_value = "tryon")]
    name: String,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predictions: NAME.ppm images and NAME.pgm masks.
    #[arg(long)]
    pred: PathBuf,
    /// References: REF/NAME.ppm or REF/NAME/gt.ppm, REF/NAME.pgm or REF/NAME/ctm.pgm.
    #[arg(long = "ref", value_name = "REF")]
    reference: PathBuf,
    /// Also write the report to this file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Only run cases whose name contains this string.
    #[arg(long)]
    filter: Option<String>,
}

fn run(argv: impl IntoIterator<Item = OsString>) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let outcome = cit_core::harness::train::with_threads(None, || commands::dispatch(cli.command));
    match outcome.and_then(|r| r) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                cit_core::Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
