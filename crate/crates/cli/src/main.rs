//! `inreg`: registration runs, synthetic benchmarks, evaluation, warping and
//! reports.
//!
//! Exit codes: 0 success, 2 invalid arguments or configuration, 3 I/O
//! failure or missing artifacts, 4 non-finite loss.

mod config;
mod error;
mod eval;
mod output;
mod register;
mod report;
mod synth;
mod warp;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliResult;

#[derive(Parser)]
#[command(name = "inreg", version, about = "Pairwise image registration with untrained coordinate networks")]
struct Cli {
    /// Print only a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving image to a fixed image, or every pair of a synth directory.
    Register(RegisterArgs),
    /// Generate synthetic pairs with known warps.
    Synth(SynthArgs),
    /// Score registration results against ground truth.
    Eval(EvalArgs),
    /// Resample an image or label map through a field or checkpoint.
    Warp(WarpArgs),
    /// Render loss curve and overlays for a registration run.
    Report(ReportArgs),
    /// Print the fully resolved configuration for an input size.
    Defaults(DefaultsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Rigid,
    Deformable,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModalityArg {
    Single,
    Multi,
}

#[derive(Args)]
pub struct RegisterArgs {
    /// Fixed image (PNG, PGM, raw-volume JSON sidecar or NIfTI).
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    /// Moving image, same formats and extents as the fixed image.
    #[arg(long)]
    pub moving: Option<PathBuf>,
    /// Register every pair_* subdirectory of a synth output directory.
    #[arg(long, conflicts_with_all = ["fixed", "moving"])]
    pub batch: Option<PathBuf>,
    /// Motion granularity [default: rigid].
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Single channel or two-channel (multi-modal) image network [default: single].
    #[arg(long, value_enum)]
    pub modality: Option<ModalityArg>,
    /// JSON configuration file; any key can also be given with --set.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoint, field, loss CSV and summary.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Seed for initialization and sampling [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ground-truth warp JSON; adds the corner error to the summary.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Override one configuration key, e.g. run.epochs=200 or normalize=false.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Worker threads for --batch.
    #[arg(long, env = "INREG_WORKERS", default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Preset rigid level 1..=4 (translation 2/5/10/18 %, rotation 0/2/5/10 degrees).
    #[arg(long, conflicts_with = "rbf")]
    pub level: Option<usize>,
    /// JSON file with a list of Gaussian bumps {center, amplitude, bandwidth} in voxels.
    #[arg(long)]
    pub rbf: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "single")]
    pub modality: ModalityArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Extents such as 64, 96x80 or 32x32x32.
    #[arg(long, default_value = "64")]
    pub size: String,
    /// Standard deviation of the Gaussian noise added to the moving image.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Number of ellipse/ellipsoid labels to generate (0 for none).
    #[arg(long, default_value_t = 0)]
    pub labels: u32,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    Corner,
    Labels,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Directory of register outputs, one subdirectory per pair.
    #[arg(long)]
    pub results_dir: PathBuf,
    /// Synth directory with the matching pair subdirectories.
    #[arg(long)]
    pub truth_dir: PathBuf,
    #[arg(long, value_enum, default_value = "corner")]
    pub protocol: ProtocolArg,
    /// Success threshold on the corner relative distance, percent.
    #[arg(long, default_value_t = 2.0)]
    pub threshold: f64,
    /// Where eval.csv and eval.json go [default: the results directory].
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum InterpArg {
    Linear,
    Nearest,
}

#[derive(Args)]
pub struct WarpArgs {
    /// Displacement field file written by register.
    #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
    pub field: Option<PathBuf>,
    /// Model checkpoint written by register.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Image or label map in the fixed frame.
    #[arg(long)]
    pub input: PathBuf,
    /// Treat the input as an integer label map.
    #[arg(long)]
    pub labels: bool,
    /// Interpolation [default: nearest for labels, linear otherwise].
    #[arg(long, value_enum)]
    pub interp: Option<InterpArg>,
    /// Output file (.png or .json).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Directory written by register.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Output directory [default: <run-dir>/report].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct DefaultsArgs {
    /// Extents such as 64, 96x80 or 32x32x32.
    #[arg(long, default_value = "64")]
    pub size: String,
    #[arg(long, value_enum, default_value = "rigid")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "single")]
    pub modality: ModalityArg,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Register(args) => register::run(&args, cli.json),
        Command::Synth(args) => synth::run(&args, cli.json),
        Command::Eval(args) => eval::run(&args, cli.json),
        Command::Warp(args) => warp::run(&args, cli.json),
        Command::Report(args) => report::run(&args, cli.json),
        Command::Defaults(args) => register::print_defaults(&args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("inreg: {e}");
            e.exit_code()
        }
    }
}
