//! `ddbridge`: batch front end for cohort generation, training, local
//! adaptation, sampling and evaluation.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use failure::Failure;

#[derive(Parser, Debug)]
#[command(
    name = "ddbridge",
    version,
    about = "Structure-to-function diffusion bridge toolkit"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 1 gives bit-exact reruns.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a paired phantom cohort with a balanced split.
    GenData,
    /// Train a denoiser from scratch.
    Train {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Fine-tune a trained checkpoint on a local cohort.
    Adapt {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Simulate function volumes for the selected subjects.
    Sample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        nstep: Option<usize>,
    },
    /// Score simulated volumes against the cohort's true function volumes.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// `samples.jsonl` written by `sample`.
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Quality and runtime across sampler step counts.
    SweepSteps {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Keep-one auxiliary-variable sensitivity.
    AblateAux {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        nstep: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Failure::config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::runtime(e.to_string()))?;
    }
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    if let Command::Sample { nstep: Some(n), .. } | Command::AblateAux { nstep: Some(n), .. } =
        &cli.command
    {
        cfg.sampler.n_step = *n;
    }
    let cfg = cfg.resolve(cli.common.seed)?;
    let out = &cli.common.out;
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg, out),
        Command::Train { manifest } => commands::train_cmd(&cfg, manifest, out),
        Command::Adapt {
            manifest,
            checkpoint,
        } => commands::adapt_cmd(&cfg, manifest, checkpoint.as_deref(), out),
        Command::Sample {
            manifest,
            checkpoint,
            ..
        } => commands::sample_cmd(&cfg, manifest, checkpoint, out),
        Command::Evaluate {
            manifest,
            predictions,
        } => commands::evaluate_cmd(&cfg, manifest, predictions, out),
        Command::SweepSteps {
            manifest,
            checkpoint,
        } => commands::sweep_cmd(&cfg, manifest, checkpoint, out),
        Command::AblateAux {
            manifest,
            checkpoint,
            ..
        } => commands::ablate_cmd(&cfg, manifest, checkpoint, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code() as u8)
        }
    }
}
