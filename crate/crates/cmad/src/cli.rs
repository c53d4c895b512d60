//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::{apply_override, load_table, FileConfig, RunConfig};
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "cmad", version, about = "Cooperative control of several diffusion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML config file; unset keys take the task preset.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lambda=0.5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut table = load_table(self.config.as_deref())?;
        for o in &self.overrides {
            apply_override(&mut table, o)?;
        }
        FileConfig::from_table(table)?.resolve()
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the task's score network by denoising score matching.
    TrainScore {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint path (default: <output_dir>/score.ckpt).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train the shapes16 classifier used by the terminal cost.
    TrainClassifier {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint path (default: <output_dir>/classifier.ckpt).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train (learned methods) and evaluate one method, writing a run directory.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a method, loading saved policies for learned methods.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Policies checkpoint (overrides `policies_checkpoint`).
        #[arg(short, long)]
        policies: Option<PathBuf>,
    },
    /// Summarise run directories and check that they are complete.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Print the fully resolved configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn print_metrics(report: &cmad_core::experiment::Report) {
    for (k, v) in report.metrics() {
        println!("{k:<16} {v}");
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainScore { cfg, out } => {
            let path = commands::train_score_net(&cfg.resolve()?, out.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::TrainClassifier { cfg, out } => {
            let (path, acc) = commands::train_classifier(&cfg.resolve()?, out.as_deref())?;
            println!("held-out accuracy {acc:.4}");
            println!("wrote {}", path.display());
        }
        Command::Run { cfg } => {
            let o = commands::run(&cfg.resolve()?)?;
            print_metrics(&o.report);
            println!("wrote {}", o.dir.display());
        }
        Command::Sample { cfg, policies } => {
            let o = commands::sample(&cfg.resolve()?, policies.as_deref())?;
            print_metrics(&o.report);
            println!("wrote {}", o.dir.display());
        }
        Command::Report { dirs } => print!("{}", commands::report(&dirs)?),
        Command::Config { cfg } => print!("{}", cfg.resolve()?.snapshot().to_toml()),
    }
    Ok(())
}
