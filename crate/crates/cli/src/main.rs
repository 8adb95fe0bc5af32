mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use goat_core::data::TextureKind;
use goat_core::Error;

/// Occlusion-aware stereo matching at desk scale.
#[derive(Debug, Parser)]
#[command(name = "goat", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic stereo dataset with exact ground truth.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus a loss log.
    Train(TrainArgs),
    /// Score a checkpoint (or the ground truth itself) on a dataset.
    Eval(EvalArgs),
    /// Predict disparity and occlusion for one image pair.
    Infer(InferArgs),
    /// Derive an occlusion mask by the left-right consistency check.
    OccGt(OccGtArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Dataset root; samples go to <out>/<split>.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image size as HEIGHTxWIDTH.
    #[arg(long, default_value = "64x128", value_parser = parse_size)]
    size: (usize, usize),
    /// Background plus foreground rectangles.
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Largest disparity in pixels; must be below width/4.
    #[arg(long, default_value_t = 24.0)]
    dmax: f64,
    /// noise, gradient, checker or mixed.
    #[arg(long, default_value = "noise")]
    texture: TextureKind,
    /// Real-valued instead of integer layer disparities.
    #[arg(long)]
    fractional: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset split directory (containing manifest.json).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory for checkpoints, loss log and config echo.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Refinement iterations T.
    #[arg(long)]
    iterations: Option<usize>,
    /// Write a checkpoint every this many steps (0 = only at the end).
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Checkpoint written by `goat train`.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Run configuration; defaults to config.toml next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset split directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory: one JSON per sample plus report.csv and summary.json.
    #[arg(long)]
    report: PathBuf,
    /// Score the ground truth itself instead of a model.
    #[arg(long, conflicts_with_all = ["ckpt", "config"])]
    oracle: bool,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Left view (binary PPM).
    #[arg(long)]
    left: PathBuf,
    /// Right view (binary PPM).
    #[arg(long)]
    right: PathBuf,
    /// Output directory for disparity.pfm, occlusion.pgm and disparity.ppm.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct OccGtArgs {
    /// Left disparity (PFM); direct mode.
    #[arg(long = "dispL", alias = "disp-left", requires = "disp_right", conflicts_with_all = ["ckpt", "left", "right"])]
    disp_left: Option<PathBuf>,
    /// Right disparity (PFM); direct mode.
    #[arg(long = "dispR", alias = "disp-right", requires = "disp_left")]
    disp_right: Option<PathBuf>,
    /// Checkpoint for flipped-inference mode.
    #[arg(long, requires_all = ["left", "right"])]
    ckpt: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    config: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    left: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    right: Option<PathBuf>,
    /// Output mask (PGM, 255 = occluded).
    #[arg(long)]
    out: PathBuf,
    /// Largest left-right disagreement still counted as consistent.
    #[arg(long, default_value_t = goat_core::occlusion_gt::DEFAULT_THRESHOLD)]
    threshold: f64,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("GOAT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("GOAT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer(a),
        Command::OccGt(a) => commands::occ_gt(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
