//! `msloc`: multi-scene visual-localization experiments on procedurally
//! generated indoor scenes.

mod config;
mod error;
mod experiments;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Config;
use error::CliError;
use experiments::{RunContext, Variant};

#[derive(Parser)]
#[command(
    name = "msloc",
    about = "Multi-scene visual localization: joint scene-coordinate training with a learnable layer-sharing policy and RANSAC-PnP pose recovery",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides experiment.out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed (overrides experiment.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Bypass config-hash consistency checks.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render every scene's dataset to <out>/data.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train one model jointly over all scenes.
    TrainJoint {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train one single-scene model per scene.
    TrainSeparate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Add a new scene to a trained checkpoint with frozen shared weights.
    Generalize {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint on one scene split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Joint training with one component disabled.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// One of: full, no-attention, no-gradnorm, no-penalty.
        #[arg(long)]
        variant: String,
    },
    /// Summarize a finished run directory.
    Report {
        /// Run directory containing run_record.json.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_ctx(common: &CommonArgs) -> Result<RunContext, CliError> {
    let mut cfg = Config::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.experiment.out_dir = out.clone();
    }
    Ok(RunContext::new(cfg))
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { common } => {
            let ctx = load_ctx(&common)?;
            experiments::gen_data(&ctx)?;
        }
        Command::TrainJoint { common } => {
            let ctx = load_ctx(&common)?;
            experiments::run_joint(&ctx, common.force)?;
            print!("{}", experiments::report(&ctx.out)?);
        }
        Command::TrainSeparate { common } => {
            let ctx = load_ctx(&common)?;
            experiments::run_separate(&ctx, common.force)?;
            print!("{}", experiments::report(&ctx.out)?);
        }
        Command::Generalize { common } => {
            let ctx = load_ctx(&common)?;
            experiments::run_generalize(&ctx, common.force)?;
            print!("{}", experiments::report(&ctx.out)?);
        }
        Command::Evaluate { common } => {
            let ctx = load_ctx(&common)?;
            let path = experiments::evaluate(&ctx, common.force)?;
            println!("wrote {}", path.display());
        }
        Command::Ablate { common, variant } => {
            let variant: Variant = variant.parse().map_err(CliError::Usage)?;
            let mut cfg = Config::load(&common.config)?;
            if let Some(seed) = common.seed {
                cfg.experiment.seed = seed;
            }
            if let Some(out) = &common.out {
                cfg.experiment.out_dir = out.clone();
            }
            let out_dir = cfg.experiment.out_dir.clone();
            experiments::ablate(cfg, variant, common.force)?;
            print!("{}", experiments::report(&out_dir)?);
        }
        Command::Report { out } => {
            print!("{}", experiments::report(&out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
