//! `taco`: world generation, Oracle data building, training, inference,
//! evaluation and ablations from one TOML config.
//!
//! Exit codes: 0 ok, 1 invalid input or config, 2 runtime failure.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "taco", version, about = "Task-aware in-context demonstration selection on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the world and write library and query files.
    GenWorld(Common),
    /// Build the Oracle training set.
    BuildData(Common),
    /// Train and write checkpoints plus the metrics CSV.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint holding optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this epoch.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Train once per (lambda1, lambda2) pair from the `sweep` section.
        #[arg(long)]
        sweep: bool,
    },
    /// Beam-infer demonstration sequences for a query file.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Shots n; may differ from the training N.
        #[arg(long, short = 'n')]
        shots: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score methods on the evaluation queries and write a report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated; overrides `methods`.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Retrain with each component removed and compare against the full model.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seeds: Option<u64>,
    },
}

fn load(common: &Common, tweak: impl FnOnce(&mut RunConfig)) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    tweak(&mut cfg);
    Ok(cfg.resolve()?)
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenWorld(c) => commands::gen_world(&load(&c, |_| {})?),
        Cmd::BuildData(c) => commands::build_data(&load(&c, |_| {})?),
        Cmd::Train { common, resume, stop_after, sweep } => {
            commands::train(&load(&common, |_| {})?, &commands::TrainArgs { resume, stop_after, sweep })
        }
        Cmd::Generate { common, checkpoint, queries, shots, output } => {
            commands::generate(&load(&common, |_| {})?, &commands::GenerateArgs { checkpoint, queries, shots, output })
        }
        Cmd::Evaluate { common, methods, checkpoint } => {
            let cfg = load(&common, |c| {
                if let Some(m) = methods {
                    c.methods = m;
                }
            })?;
            commands::evaluate(&cfg, checkpoint)?.print();
            Ok(())
        }
        Cmd::Ablate { common, seeds } => {
            let cfg = load(&common, |c| {
                if let Some(s) = seeds {
                    c.ablate.seeds = s;
                }
            })?;
            commands::ablate(&cfg)?.print();
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<taco_core::Error>()) {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
