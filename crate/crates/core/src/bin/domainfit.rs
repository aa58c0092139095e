// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use domainfit::pipeline::{run_stage, PipelineConfig, RunManifest, Stage, WorkspaceLock};
use domainfit::{Error, Result};

#[derive(Parser)]
#[command(name = "domainfit", version, about = "Domain curation, pruning and distillation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// With `pipeline`: stop after this stage.
    #[arg(long, global = true)]
    stage: Option<String>,
    /// Re-run even when inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    GenCorpus,
    TrainLm,
    DumpActs,
    Topk,
    TrainSae,
    Embed,
    Curate,
    Prune,
    Distill,
    Finetune,
    Eval,
    Sweep,
    Report,
    /// Every stage in order.
    Pipeline,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::GenCorpus => Stage::GenCorpus,
            Command::TrainLm => Stage::TrainLm,
            Command::DumpActs => Stage::DumpActs,
            Command::Topk => Stage::Topk,
            Command::TrainSae => Stage::TrainSae,
            Command::Embed => Stage::Embed,
            Command::Curate => Stage::Curate,
            Command::Prune => Stage::Prune,
            Command::Distill => Stage::Distill,
            Command::Finetune => Stage::Finetune,
            Command::Eval => Stage::Eval,
            Command::Sweep => Stage::Sweep,
            Command::Report => Stage::Report,
            Command::Pipeline => return None,
        })
    }
}

fn print(m: &RunManifest) {
    if m.noop {
        println!("{:<11} up to date", m.stage);
    } else {
        println!("{:<11} done in {} ms, {} outputs", m.stage, m.wall_time_ms, m.outputs.len());
    }
}

fn run(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let stop = cli.stage.as_deref().map(str::parse::<Stage>).transpose()?;
    let _lock = WorkspaceLock::acquire(&cfg.workspace)?;
    match cli.command.stage() {
        Some(stage) => {
            if stop.is_some_and(|s| s != stage) {
                return Err(Error::Config(format!("--stage conflicts with subcommand `{stage}`")));
            }
            print(&run_stage(&cfg, stage, cli.force)?);
        }
        None => {
            for stage in Stage::ALL {
                print(&run_stage(&cfg, stage, cli.force)?);
                if stop == Some(stage) {
                    break;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
