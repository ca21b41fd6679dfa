use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod manifest;

#[derive(Debug, Parser)]
#[command(name = "saff", version, about = "Fit a dynamic semantic field to a video and split it into objects")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// TOML configuration; missing sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (a checkpoint directory for `fit`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset with ground truth masks.
    Synth,
    /// Train a field on a dataset.
    Fit {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Render every channel of every input and hold-out view.
    Render {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Cluster rendered features into salient objects and background.
    Decompose {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Refine the label maps with the dense CRF.
        #[arg(long)]
        crf: bool,
    },
    /// Score predicted label maps (and rendered images) against a dataset.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Directory written by `decompose`.
        #[arg(long)]
        pred: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> saff::Result<()> {
    let cfg = commands::load_config(cli.config.as_deref(), cli.seed)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(saff::Error::Validation(
            "no subcommand given (expected synth, fit, render, decompose or eval)".into(),
        ));
    };
    commands::execute(&command, &cfg, cli.out)
}
