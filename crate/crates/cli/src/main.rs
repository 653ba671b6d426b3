//! `dpilab`: train, evaluate and compare scalar-conditioned generative models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

const AFTER_HELP: &str = "\
Run settings are resolved in this order, later sources winning:
  built-in defaults < --config file < named flags < --set KEY=VALUE

Exit codes: 0 ok, 2 configuration error, 3 numeric abort, 4 I/O or format error.";

#[derive(Parser)]
#[command(name = "dpilab", version, about, after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its checkpoint, metrics and resolved config.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoising sweep over diffusion checkpoints with shared noise.
    SweepDenoise {
        /// Comma-separated checkpoint files.
        #[arg(long, value_delimiter = ',', required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Noise realizations per step.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 1000)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        /// Comma-separated steps; defaults to ten evenly spaced steps.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
    },
    /// Draw samples from a checkpoint and score them against the dataset.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        /// Sampler steps; defaults to the checkpoint's sample_steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Flow ODE solver: euler or heun.
        #[arg(long)]
        solver: Option<String>,
        /// Sampling seed; defaults to the run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge trained run directories into one comparison table.
    Report {
        /// Comma-separated run directories written by `train`.
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<PathBuf>,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Matched-budget runs with learnable versus fixed linear λ.
    AblateLambda {
        /// learnable, linear or both.
        #[arg(long, default_value = "both")]
        mode: String,
        /// Number of seeds per mode, counting up from the run seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and FLOP accounting of interpolation for both networks.
    Overhead {
        /// Batch size one blend is amortized over.
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// diffusion or flow.
    #[arg(long)]
    framework: Option<String>,
    /// dpi, none, tmap, sigmamap, film or ncsnv2.
    #[arg(long)]
    conditioning: Option<String>,
    /// gauss8, two_moons, checkerboard, blob_images or gaussian.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// exact_endpoint, paper_cumsum or fixed_linear.
    #[arg(long)]
    lambda_mode: Option<String>,
    /// Any config key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
