//! Argument parsing and exit codes: 0 success, 1 invalid configuration or
//! input, 2 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::{ConfigError, RunConfig};
use crate::stages::{Outcome, Workspace};

#[derive(Debug, Parser)]
#[command(name = "ant-lab", version, about = "Concept erasure on a 2-D toy diffusion model")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Configuration file of `key = value` lines
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for artifacts (overrides `run_dir`)
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Rerun stages even when their inputs are unchanged
    #[arg(long, global = true)]
    pub force: bool,
    /// Master seed (overrides `seed`)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override one configuration key, e.g. `--set ant.steps=500`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the labelled mixture dataset
    GenData,
    /// Train the conditional noise predictor
    Pretrain,
    /// Build the concept saliency mask
    Saliency,
    /// Erase `ant.target` from the pretrained model
    Erase,
    /// Erase `fuse.concepts` with per-concept adapters and fuse them
    EraseMulti,
    /// Evaluate the erased (or fused) model
    Eval,
    /// Sample chains for `ant.target` and record trajectories
    Sample {
        /// Checkpoint in the run directory to sample from
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Sweep the reversal rung t' on the pretrained model
    SweepTprime,
    /// Erase once per loss variant and compare
    Ablate,
    /// Render SVGs from the CSV artifacts present
    Plot,
    /// Run every stage in order and write summary.csv
    Pipeline,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Saliency => "saliency",
            Command::Erase => "erase",
            Command::EraseMulti => "erase-multi",
            Command::Eval => "eval",
            Command::Sample { .. } => "sample",
            Command::SweepTprime => "sweep-tprime",
            Command::Ablate => "ablate",
            Command::Plot => "plot",
            Command::Pipeline => "pipeline",
        }
    }
}

pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ConfigError::Invalid(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.run_dir {
        cfg.run_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(stage: &str, outcome: Outcome) {
    if outcome == Outcome::Skipped {
        println!("{stage}: up to date");
    } else {
        println!("{stage}: done");
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    std::fs::create_dir_all(&cfg.run_dir)
        .with_context(|| format!("cannot create run directory {}", cfg.run_dir.display()))?;
    let ws = Workspace::new(cfg, cli.common.force);
    ws.write_resolved_config()?;
    let name = cli.command.name();
    let outcome = match &cli.command {
        Command::GenData => commands::gen_data(&ws)?,
        Command::Pretrain => commands::pretrain_cmd(&ws)?,
        Command::Saliency => commands::saliency_cmd(&ws)?,
        Command::Erase => commands::erase_cmd(&ws)?,
        Command::EraseMulti => commands::erase_multi_cmd(&ws)?,
        Command::Eval => commands::eval_cmd(&ws)?,
        Command::Sample { checkpoint } => commands::sample_cmd(&ws, checkpoint.as_deref())?,
        Command::SweepTprime => commands::sweep_cmd(&ws)?,
        Command::Ablate => commands::ablate_cmd(&ws)?,
        Command::Plot => {
            for f in commands::plot_cmd(&ws)? {
                println!("wrote {f}");
            }
            return Ok(());
        }
        Command::Pipeline => {
            commands::pipeline(&ws)?;
            println!("pipeline: done, see {}", ws.path(commands::SUMMARY).display());
            return Ok(());
        }
    };
    report(name, outcome);
    Ok(())
}

/// 1 when the chain contains a configuration or input validation error.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let validation = err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some()
            || e.downcast_ref::<ant_lab_core::Error>().is_some_and(|c| c.is_validation())
    });
    if validation {
        1
    } else {
        2
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("ANT_LAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    init_threads();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
