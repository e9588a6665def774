//! `nit`: train, sample, plan packs, self-verify and plot.
//!
//! Every subcommand accepts `--config FILE` (key=value lines) and repeated
//! `--set key=value`; dedicated flags override both. A manifest holding the
//! effective settings is written to the output directory, and feeding it back
//! through `--config` repeats the run.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] nit_core::NitError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Directory for every artifact of the run.
    #[arg(long, default_value = "nit-out", global = true)]
    pub out_dir: PathBuf,
    /// key=value settings file (a previous run's manifest works too).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra key=value setting, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Parser)]
#[command(name = "nit", version, about = "Native-resolution diffusion transformer toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a synthetic multi-resolution dataset.
    Train {
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// a (native sizes), b (native + fixed squares) or c (fixed squares).
        #[arg(long)]
        mixture: Option<String>,
        #[arg(long)]
        tokens_per_step: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Generate one image at an arbitrary pixel size.
    Sample {
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long = "class")]
        class_id: Option<u32>,
        /// Sample from the null class instead.
        #[arg(long, conflicts_with = "class_id")]
        unconditional: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        cfg_lo: Option<f64>,
        #[arg(long)]
        cfg_hi: Option<f64>,
        /// Without one, a freshly initialized model is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// File name inside the output directory; `.ppm` selects PPM.
        #[arg(long)]
        output: Option<String>,
    },
    /// Plan packs for a list of HxW image sizes.
    PackPlan {
        /// File of HxW lines; stdin when absent or `-`.
        input: Option<PathBuf>,
        #[arg(long)]
        downsample: Option<usize>,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Run the self-check suites; exits nonzero on any failure.
    Verify {
        /// `all` or a comma-separated list of suites.
        #[arg(long)]
        scope: Option<String>,
        /// Deliberately break a component (known: attention-sign).
        #[arg(long)]
        inject_fault: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Plot a training loss log.
    Stats {
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        output: Option<String>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let common = &cli.common;
    match &cli.command {
        Command::Train { steps, seed, mixture, tokens_per_step, lr } => {
            let flags = [
                ("train.steps", s(steps)),
                ("train.seed", s(seed)),
                ("data.mixture", s(mixture)),
                ("train.tokens_per_step", s(tokens_per_step)),
                ("train.lr", s(lr)),
            ];
            commands::train(common, &flags)?;
        }
        Command::Sample {
            height,
            width,
            class_id,
            unconditional,
            seed,
            steps,
            cfg_scale,
            cfg_lo,
            cfg_hi,
            checkpoint,
            output,
        } => {
            let class = if *unconditional { Some("-1".to_string()) } else { s(class_id) };
            let flags = [
                ("sample.height", s(height)),
                ("sample.width", s(width)),
                ("sample.class", class),
                ("sample.seed", s(seed)),
                ("sample.steps", s(steps)),
                ("sample.cfg_scale", s(cfg_scale)),
                ("sample.cfg_lo", s(cfg_lo)),
                ("sample.cfg_hi", s(cfg_hi)),
                ("sample.checkpoint", checkpoint.as_ref().map(|p| p.display().to_string())),
                ("sample.output", s(output)),
            ];
            commands::sample(common, &flags)?;
        }
        Command::PackPlan { input, downsample, patch, budget } => {
            let flags = [
                ("pack.downsample", s(downsample)),
                ("pack.patch", s(patch)),
                ("pack.budget", s(budget)),
            ];
            commands::pack_plan(common, &flags, input.as_deref())?;
        }
        Command::Verify { scope, inject_fault, seed } => {
            let flags = [
                ("verify.scope", s(scope)),
                ("verify.inject_fault", s(inject_fault)),
                ("verify.seed", s(seed)),
            ];
            return commands::verify(common, &flags);
        }
        Command::Stats { log, output, width, height } => {
            let flags = [
                ("stats.log", log.as_ref().map(|p| p.display().to_string())),
                ("stats.output", s(output)),
                ("stats.width", s(width)),
                ("stats.height", s(height)),
            ];
            commands::stats(common, &flags)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
