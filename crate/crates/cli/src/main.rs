use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use modprompt::experiment::{
    adapt_phase, evaluate_phase, generate_data, load_pretrained, pretrain_phase, report_phase, run_config,
    ExperimentConfig,
};

/// Adapts a detector pretrained on synthetic RGB to pseudo-IR or pseudo-depth
/// input and reports AP tables.
#[derive(Parser)]
#[command(name = "modprompt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Paths {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Results directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source and target datasets.
    GenerateData(Paths),
    /// Train the detector on the source modality.
    Pretrain(Paths),
    /// Run every configured strategy and seed.
    Adapt(Paths),
    /// Score adapted checkpoints on target and source test splits.
    Evaluate(Paths),
    /// Rebuild report.md and report.csv from the stored records.
    Report(Paths),
    /// All of the above, reusing finished phases.
    Run(Paths),
}

fn load(config: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(p) => generate_data(&load(&p.config)?)?,
        Command::Pretrain(p) => {
            pretrain_phase::<f32>(&load(&p.config)?, &p.out)?;
        }
        Command::Adapt(p) => {
            let cfg = load(&p.config)?;
            let base = load_pretrained::<f32>(&cfg, &p.out)?;
            adapt_phase(&cfg, &p.out, &base)?;
        }
        Command::Evaluate(p) => {
            evaluate_phase::<f32>(&load(&p.config)?, &p.out)?;
        }
        Command::Report(p) => {
            let (md, _) = report_phase(&load(&p.config)?, &p.out)?;
            print!("{md}");
        }
        Command::Run(p) => {
            let cfg = load(&p.config)?;
            run_config::<f32>(&cfg, &p.out)?;
            print!("{}", std::fs::read_to_string(p.out.join("report.md"))?);
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
            ExitCode::FAILURE
        }
    }
}
