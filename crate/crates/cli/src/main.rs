use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod plot;
mod settings;

/// Bad invocation: unknown key, unparsable value, missing input.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "cryoscore", version, about = "Target-guided score-based denoising of cryo-EM micrographs")]
pub struct Cli {
    /// Configuration file (`key = value` lines). Defaults to $CRYOSCORE_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate phantom micrographs with ground-truth coordinates.
    Simulate(SimulateArgs),
    /// Project a reference volume into a target bank archive.
    BuildTargets(BuildTargetsArgs),
    /// Train a score model on a directory of micrographs.
    Train(TrainArgs),
    /// Denoise one micrograph with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Score predicted coordinates against ground truth.
    Evaluate(EvaluateArgs),
    /// Fourier shell correlation of two volumes.
    Fsc(FscArgs),
    /// Run the training ablation grid and compare picking and PSNR.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Phantom description (`key = value`); built-in defaults otherwise.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Number of micrographs; more than one goes into `mic_NNN` subdirectories.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Overrides the phantom file's rotation seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct BuildTargetsArgs {
    /// Reference volume (MRC).
    pub volume: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub views: Option<usize>,
    /// Low-pass cutoff in 1/Å.
    #[arg(long)]
    pub cutoff: Option<f64>,
    /// Softmax temperature stored with the bank.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Projection side length; must match the training patch size.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub inplane_rotations: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory searched recursively for micrographs.
    pub data: PathBuf,
    /// Target bank archive; not needed with --dsm-only.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Receives model.ckpt, metrics.csv, bank.tgb, config.txt and loss.svg.
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub dsm_only: bool,
    /// Constant target weight in place of the match confidence.
    #[arg(long, value_name = "W")]
    pub fixed_wt: Option<f64>,
    /// Full guidance weight from the first epoch.
    #[arg(long)]
    pub no_anneal: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct DenoiseArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub noise_a: Option<f64>,
    #[arg(long)]
    pub noise_b: Option<f64>,
    /// Tile side, or `auto` for the model patch size.
    #[arg(long)]
    pub tile_size: Option<String>,
    #[arg(long)]
    pub overlap: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Predicted coordinates: a file, or a directory mirroring `gt`.
    pub pred: PathBuf,
    /// Ground-truth coordinates: a file or a directory of `*.txt` files.
    pub gt: PathBuf,
    /// Match radius in pixels.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, short, default_value = "metrics.csv")]
    pub out: PathBuf,
    /// Also write a bar chart of the metrics.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    /// Label of the method column.
    #[arg(long, default_value = "pred")]
    pub method: String,
}

#[derive(Args, Debug)]
pub struct FscArgs {
    pub v1: PathBuf,
    pub v2: PathBuf,
    #[arg(long, short, default_value = "fsc.csv")]
    pub out: PathBuf,
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Directory of simulated micrographs (`noisy.mrc` with optional
    /// `clean.mrc` and `coords.txt` alongside).
    pub data: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// Maps an error chain onto the documented exit codes.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<cryoscore::Error>() {
            return match e {
                e if e.is_numerical() => 3,
                cryoscore::Error::Parameter(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
