//! `deidseq`: generate, pretrain, train, predict, ensemble and evaluate from
//! one configuration file.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, PipelineConfig, Preset};
use error::CliError;

#[derive(Parser)]
#[command(name = "deidseq", version, about = "PHI de-identification with BiLSTM-CRF taggers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic annotated corpus (to `corpus`, or `--out`).
    Generate(Common),
    /// Pretrain forward and backward character LMs on the training split.
    PretrainLm(Common),
    /// Train a tagger on the train split with early stopping on dev.
    Train(Common),
    /// Label documents with a trained tagger and apply the rules.
    Predict(Common),
    /// Combine several prediction directories by weighted voting.
    Ensemble(Common),
    /// Score predictions against gold annotations.
    Evaluate(Common),
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common) = match &cli.command {
        Command::Generate(c) => ("generate", c),
        Command::PretrainLm(c) => ("pretrain-lm", c),
        Command::Train(c) => ("train", c),
        Command::Predict(c) => ("predict", c),
        Command::Ensemble(c) => ("ensemble", c),
        Command::Evaluate(c) => ("evaluate", c),
    };
    let overrides = Overrides {
        preset: common.preset,
        seed: common.seed,
        out: common.out.clone(),
    };
    let config = PipelineConfig::load(&common.config, &overrides)?;
    log::info!(
        "{name}: preset {}, seed {}, config {}",
        config.preset,
        config.seed,
        commands::config_hash(&config)
    );
    match cli.command {
        Command::Generate(_) => {
            let dir = overrides.out.unwrap_or_else(|| config.corpus.clone());
            commands::cmd_generate(&config, &dir)
        }
        Command::PretrainLm(_) => commands::cmd_pretrain_lm(&config),
        Command::Train(_) => commands::cmd_train(&config),
        Command::Predict(_) => commands::cmd_predict(&config),
        Command::Ensemble(_) => commands::cmd_ensemble(&config),
        Command::Evaluate(_) => commands::cmd_evaluate(&config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
