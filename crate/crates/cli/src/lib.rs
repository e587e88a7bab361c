//! Command-line front end for `swarm-merge`: run configuration, the four
//! commands, and the synthetic benchmark harness.

pub mod bench;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

#[derive(Debug, Parser)]
#[command(
    name = "swarm-merge",
    version,
    about = "Merge expert checkpoints with particle swarm optimization",
    after_help = "Any config field can be overridden with its dotted name, e.g. --pso.w=0.2 or --merge.method ties."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a static merging method.
    Merge(CommonArgs),
    /// Run PSO-Merging.
    Pso(CommonArgs),
    /// Compare all methods on synthetic experts.
    BenchSynthetic(CommonArgs),
    /// Score one checkpoint with the configured evaluator.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Merge(c) | Command::Pso(c) | Command::BenchSynthetic(c) => c,
            Command::Eval { common, .. } => common,
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// its report. `pso` also prints its hyperparameter echo to stdout.
pub fn run<I, T>(args: I) -> Result<Value>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<String> = args
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let (args, mut overrides) = config::extract_overrides(args)?;
    let cli = Cli::try_parse_from(args)?;
    let common = cli.command.common();
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let mut cfg = config::resolve(common.config.as_deref(), &overrides)?;
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    match &cli.command {
        Command::Merge(_) => commands::cmd_merge(&cfg),
        Command::Pso(_) => {
            println!("{}", commands::pso_echo(&cfg));
            commands::cmd_pso(&cfg)
        }
        Command::BenchSynthetic(_) => {
            let v = commands::cmd_bench(&cfg)?;
            print!("{}", std::fs::read_to_string(cfg.out_dir.join("table.md"))?);
            Ok(v)
        }
        Command::Eval { checkpoint, .. } => {
            let v = commands::cmd_eval(&cfg, checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&v)?);
            Ok(v)
        }
    }
}
