use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use paddles_cli::config::StudyConfig;
use paddles_cli::runner::load_config;
use paddles_cli::{exit_code, replay, run_experiment, synth_data, ExperimentConfig, Options};
use paddles_core::{Error, Result};

#[derive(Parser)]
#[command(name = "paddles", version, about = "Phase/amplitude disentangled early-stopping experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory (overrides the config's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed (overrides the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset and write it out.
    SynthData { config: PathBuf },
    /// Run the study the config describes.
    Run { config: PathBuf },
    /// Run a sweep study.
    Sweep { config: PathBuf },
    /// Train plain, amplitude-detached and phase-detached models side by side.
    Figure1 { config: PathBuf },
    /// Re-execute a finished run from its replay file.
    Replay { dir: PathBuf },
}

fn out_dir(cli_out: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    cli_out
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("output_dir: not set in the config and no --out given".into()))
}

fn execute(cli: Cli) -> Result<()> {
    let opts = Options { quiet: cli.quiet };
    match cli.command {
        Command::SynthData { config } => {
            let cfg = load_config(&config)?;
            let out = out_dir(cli.out, &cfg)?;
            synth_data(cfg, cli.seed, &out, &opts)?;
        }
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let out = out_dir(cli.out, &cfg)?;
            run_experiment(cfg, cli.seed, &out, &opts)?;
        }
        Command::Sweep { config } => {
            let cfg = load_config(&config)?;
            if !matches!(cfg.study, StudyConfig::Sweep { .. }) {
                return Err(Error::Config("study.kind: the sweep command needs a sweep study".into()));
            }
            let out = out_dir(cli.out, &cfg)?;
            run_experiment(cfg, cli.seed, &out, &opts)?;
        }
        Command::Figure1 { config } => {
            let mut cfg = load_config(&config)?;
            if !matches!(cfg.study, StudyConfig::Figure1 { .. }) {
                cfg.study = StudyConfig::Figure1 { epochs: 60 };
            }
            let out = out_dir(cli.out, &cfg)?;
            run_experiment(cfg, cli.seed, &out, &opts)?;
        }
        Command::Replay { dir } => {
            let out = cli.out.unwrap_or_else(|| replay_dir(&dir));
            replay(&dir, &out, &opts)?;
        }
    }
    Ok(())
}

fn replay_dir(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".replay");
    dir.with_file_name(name)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
