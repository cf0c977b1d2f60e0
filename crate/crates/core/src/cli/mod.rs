//! Command-line front end.

mod checkpoint;
mod config;
mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, save_model};
pub use config::{EvalSection, IdentifyConfig, MemorySection, ModelSpec, PolicySpec, RunConfig};
pub use pipeline::*;

use crate::error::Error;

#[derive(Debug, Parser)]
#[command(name = "srki", about = "Knowledge injection into a toy decoder with supervised retrieval")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, default_value = "configs/reference.json")]
    pub config: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for all artifacts.
    #[arg(long, global = true, default_value = "runs/reference")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the lexicon, triples, KB entries and QA splits.
    GenData,
    /// Pretrain the backbone and train adapters with the LM loss.
    TrainStage1 {
        /// Reuse an existing backbone snapshot instead of pretraining.
        #[arg(long)]
        keep_backbone: bool,
    },
    /// Pick the retrieval layer with the stage-one adapters.
    IdentifyLayer,
    /// Train adapters with the LM and attention losses.
    TrainStage2,
    /// Evaluate held-out questions.
    Eval {
        #[arg(long, value_enum, default_value = "2")]
        stage: StageArg,
        /// Also run the recall sweep over growing pools.
        #[arg(long)]
        scaling: bool,
    },
    /// Analytic cache footprint per compression mode.
    BenchMemory,
    /// Compare compression modes by decoding.
    Ablate,
    /// Every step in order.
    All,
}

/// Exit code for a finished command: 0 on success, 1 for invalid input,
/// 2 for failures while running.
pub fn exit_code(result: &crate::Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(Error::Config(_) | Error::Invalid(_) | Error::Json(_) | Error::Checkpoint(_)) => 1,
        Err(_) => 2,
    }
}

pub fn run(cli: &Cli) -> crate::Result<()> {
    let mut config = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    let run = Run::new(config, &cli.out)?;
    match cli.command {
        Command::GenData => run.gen_data(),
        Command::TrainStage1 { keep_backbone } => run.train_stage1(keep_backbone),
        Command::IdentifyLayer => run.identify_layer().map(drop),
        Command::TrainStage2 => run.train_stage2(),
        Command::Eval { stage, scaling } => {
            let stage = match stage {
                StageArg::One => Stage::One,
                StageArg::Two => Stage::Two,
            };
            run.eval(stage)?;
            if scaling {
                run.scaling()?;
            }
            Ok(())
        }
        Command::BenchMemory => run.bench_memory().map(drop),
        Command::Ablate => run.ablate().map(drop),
        Command::All => run.all(),
    }
}
