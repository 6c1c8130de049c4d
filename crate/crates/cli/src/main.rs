use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use cmim_cli::{cmd_ablate, cmd_eval, cmd_gen_data, cmd_train, ExperimentConfig};
use cmim_core::evaluation::parse_subset;
use cmim_core::CmimError;

#[derive(Parser)]
#[command(name = "cmim", version, about = "Cross-modal mutual information experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the root seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest
    GenData(Common),
    /// Train a model; writes best.ckpt and metrics.csv
    Train(Common),
    /// Evaluate a checkpoint under modality dropping; writes report.csv
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load (default: <out>/best.ckpt)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Modality subset such as `flair` or `flair+t1`; repeatable
        #[arg(long, value_delimiter = ',')]
        modalities: Vec<String>,
    },
    /// Train with and without the MI terms and compare
    Ablate(Common),
}

fn load(c: &Common) -> Result<ExperimentConfig, CmimError> {
    ExperimentConfig::load(&c.config)?.resolve(c.seed, c.out.clone())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let summary = cmd_gen_data(&load(&c)?)?;
            print!("{}", summary.to_text());
        }
        Command::Train(c) => {
            let s = cmd_train(&load(&c)?)?;
            println!(
                "best epoch {} of {} (validation {:.4})\ncheckpoint: {}\nmetrics: {}",
                s.best_epoch,
                s.epochs_run,
                s.best_metric,
                s.checkpoint.display(),
                s.metrics.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            modalities,
        } => {
            let cfg = load(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out.join("best.ckpt"));
            let subsets = (!modalities.is_empty()).then(|| modalities.iter().map(|m| parse_subset(m)).collect());
            let s = cmd_eval(&cfg, &ckpt, subsets).with_context(|| format!("evaluating {}", ckpt.display()))?;
            print!("{}", s.report.to_text());
        }
        Command::Ablate(c) => {
            let s = cmd_ablate(&load(&c)?)?;
            print!("{}", s.comparison.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CmimError>().map_or(1, CmimError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
