//! Command-line front end of the noise-inversion laboratory: run configs,
//! checkpoint and image files, CSV reports and the commands that produce them.

pub mod commands;
pub mod config;
pub mod formats;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use noiseinv_core::pipelines::InitMode;

use commands::{Ctx, InpaintArgs};
use config::RunConfig;

/// Environment variable that overrides the default output directory.
pub const OUT_ENV: &str = "NOISEINV_OUT";

#[derive(Parser, Debug)]
#[command(name = "noiseinv", version, about = "One-step noise inversion for few-step inpainting, at desk scale")]
pub struct Cli {
    /// Output directory; falls back to $NOISEINV_OUT, then ./runs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// TOML run config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the multi-step teacher denoiser.
    TrainTeacher {
        /// Start over instead of resuming from an existing checkpoint.
        #[arg(long)]
        fresh: bool,
    },
    /// Distil the one-step generator from the teacher.
    Distill {
        #[arg(long)]
        fresh: bool,
    },
    /// Train the one-step inverter against the frozen generator.
    TrainInverter {
        #[arg(long)]
        fresh: bool,
    },
    /// Inpaint synthetic test cases and write PGM images plus metrics rows.
    Inpaint {
        #[arg(long, value_parser = parse_init)]
        init: InitMode,
        #[arg(long)]
        steps: usize,
        /// Seed for cases and sampler noise; defaults to eval.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 8)]
        cases: usize,
    },
    /// Evaluate every configured init mode and step count.
    Eval,
    /// Train and evaluate the four-row component ladder.
    Ablate,
    /// Print the effective config as TOML.
    PrintConfig,
}

fn parse_init(s: &str) -> Result<InitMode, String> {
    s.parse().map_err(|e: noiseinv_core::Error| e.to_string())
}

impl Cli {
    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.run_config()?;
    if let Command::PrintConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let mut ctx = Ctx::new(cfg, cli.out_dir())?;
    ctx.quiet = cli.quiet;
    match &cli.command {
        Command::TrainTeacher { fresh } => {
            ctx.fresh = *fresh;
            commands::train_teacher_cmd(&ctx)
        }
        Command::Distill { fresh } => {
            ctx.fresh = *fresh;
            commands::distill_cmd(&ctx)
        }
        Command::TrainInverter { fresh } => {
            ctx.fresh = *fresh;
            commands::train_inverter_cmd(&ctx)
        }
        Command::Inpaint { init, steps, seed, cases } => {
            commands::inpaint_cmd(&ctx, &InpaintArgs { init: *init, steps: *steps, seed: *seed, cases: *cases })
        }
        Command::Eval => commands::eval_cmd(&ctx),
        Command::Ablate => commands::ablate_cmd(&ctx),
        Command::PrintConfig => unreachable!(),
    }
}
